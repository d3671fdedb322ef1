use std::path::Path;

use serde::{Deserialize, Serialize};

use super::distribution::check_density;
use super::{MaskDistribution, MaskLayout};
use crate::error::{Error, Result};

pub const TICKET_FORMAT_VERSION: u32 = 1;

/// A deterministic binary mask over the maskable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Ticket {
    pub mask: Vec<bool>,
    pub layout: MaskLayout,
    /// Achieved density `popcount(mask) / d`.
    pub density: f64,
    /// Requested density.
    pub kappa: f64,
    /// Which method drew the ticket, e.g. `cts` or `snip`.
    pub method: String,
}

/// Number of retained entries for density `kappa`: `round(κd)`, halves up.
pub fn retained_count(kappa: f64, d: usize) -> Result<usize> {
    check_density(kappa)?;
    let n = (kappa * d as f64 + 0.5).floor() as usize;
    if n == 0 {
        return Err(Error::EmptyTicket { kappa, d });
    }
    Ok(n.min(d))
}

/// Indices ordered by descending score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Keeps the `n` highest-ranked entries (`largest`) or the `n` lowest-ranked
/// ones, i.e. the tail of the same total order.
pub fn select(scores: &[f64], n: usize, largest: bool) -> Vec<bool> {
    let order = rank_descending(scores);
    let mut mask = vec![false; scores.len()];
    let chosen: Box<dyn Iterator<Item = &usize>> = if largest {
        Box::new(order.iter().take(n))
    } else {
        Box::new(order.iter().rev().take(n))
    };
    for &i in chosen {
        mask[i] = true;
    }
    mask
}

impl Ticket {
    pub fn new(mask: Vec<bool>, layout: MaskLayout, kappa: f64, method: impl Into<String>) -> Result<Self> {
        if mask.len() != layout.d() {
            return Err(Error::OverlayLength {
                expected: layout.d(),
                got: mask.len(),
            });
        }
        let density = mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
        Ok(Ticket {
            mask,
            layout,
            density,
            kappa,
            method: method.into(),
        })
    }

    pub fn all_ones(layout: MaskLayout, method: impl Into<String>) -> Self {
        let d = layout.d();
        Ticket::new(vec![true; d], layout, 1.0, method).expect("layout length")
    }

    /// Top `round(κd)` entries by score; ties go to the lower flat index.
    pub fn from_scores(
        scores: &[f64],
        layout: MaskLayout,
        kappa: f64,
        largest: bool,
        method: impl Into<String>,
    ) -> Result<Self> {
        let n = retained_count(kappa, scores.len())?;
        Ticket::new(select(scores, n, largest), layout, kappa, method)
    }

    pub fn d(&self) -> usize {
        self.mask.len()
    }

    pub fn retained(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The mask as 0/1 values.
    pub fn as_overlay(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Sorted indices of retained weights.
    pub fn retained_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Density of each layout segment.
    pub fn layer_densities(&self) -> Vec<(String, f64)> {
        self.layout
            .segments
            .iter()
            .zip(self.layout.split(&self.mask))
            .map(|(seg, m)| {
                let kept = m.iter().filter(|&&v| v).count();
                (seg.name.clone(), kept as f64 / seg.len.max(1) as f64)
            })
            .collect()
    }

    /// Whether every retained entry of `self` is also retained in `other`.
    pub fn is_subset_of(&self, other: &Ticket) -> bool {
        self.mask.len() == other.mask.len() && self.mask.iter().zip(&other.mask).all(|(a, b)| !a || *b)
    }

    pub fn to_file(&self) -> TicketFile {
        TicketFile {
            version: TICKET_FORMAT_VERSION,
            arch: self.layout.arch.clone(),
            method: self.method.clone(),
            d: self.d(),
            kappa: self.kappa,
            density: self.density,
            layout: self.layout.segments.clone(),
            retained: self.retained_indices(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("ticket serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TicketFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("ticket file: {e}")))?;
        file.into_ticket()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk ticket: a JSON object whose `retained` field lists the indices of
/// kept weights in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TicketFile {
    pub version: u32,
    pub arch: String,
    pub method: String,
    pub d: usize,
    pub kappa: f64,
    pub density: f64,
    pub layout: Vec<super::Segment>,
    pub retained: Vec<usize>,
}

impl TicketFile {
    pub fn into_ticket(self) -> Result<Ticket> {
        if self.version != TICKET_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported ticket version {}", self.version)));
        }
        let layout = MaskLayout {
            arch: self.arch,
            segments: self.layout,
        };
        if layout.d() != self.d {
            return Err(Error::Format(format!(
                "layout covers {} entries but d = {}",
                layout.d(),
                self.d
            )));
        }
        let mut mask = vec![false; self.d];
        let mut prev: Option<usize> = None;
        for &i in &self.retained {
            if i >= self.d || prev.is_some_and(|p| p >= i) {
                return Err(Error::Format(format!("retained indices not sorted/in range at {i}")));
            }
            mask[i] = true;
            prev = Some(i);
        }
        Ticket::new(mask, layout, self.kappa, self.method)
    }
}

/// Deterministic mask keeping the `round(κd)` most probable weights.
pub fn clamp_topk(dist: &MaskDistribution, kappa: f64) -> Result<Ticket> {
    Ticket::from_scores(&dist.logits, dist.layout.clone(), kappa, true, "cts")
}

/// Score inversion: keeps the `round(κd)` least probable weights.
pub fn invert_clamp(dist: &MaskDistribution, kappa: f64) -> Result<Ticket> {
    Ticket::from_scores(&dist.logits, dist.layout.clone(), kappa, false, "cts-inverted")
}

#[cfg(test)]
mod tests {
    use super::super::distribution::logit;
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> MaskDistribution {
        MaskDistribution {
            logits: p.iter().map(|&v| logit(v)).collect(),
            tau: 2.0 / 3.0,
            layout: MaskLayout::flat(p.len()),
        }
    }

    #[test]
    fn topk_examples() {
        let d = dist(&[0.9, 0.1, 0.5]);
        assert_eq!(clamp_topk(&d, 2.0 / 3.0).unwrap().mask, vec![true, false, true]);
        assert_eq!(clamp_topk(&d, 1.0).unwrap().mask, vec![true; 3]);
        let tied = dist(&[0.3; 4]);
        assert_eq!(clamp_topk(&tied, 0.5).unwrap().mask, vec![true, true, false, false]);
    }

    #[test]
    fn inversion_examples() {
        let d = dist(&[0.9, 0.1, 0.5]);
        assert_eq!(invert_clamp(&d, 2.0 / 3.0).unwrap().mask, vec![false, true, true]);
        assert_eq!(invert_clamp(&d, 1.0).unwrap().mask, vec![true; 3]);
        let distinct = dist(&[0.2, 0.8, 0.4, 0.6]);
        let top = clamp_topk(&distinct, 0.5).unwrap();
        let bottom = invert_clamp(&distinct, 0.5).unwrap();
        assert!(top.mask.iter().zip(&bottom.mask).all(|(a, b)| a != b));
    }

    #[test]
    fn empty_ticket_is_an_error() {
        let d = dist(&[0.5; 10]);
        assert!(matches!(clamp_topk(&d, 0.01), Err(Error::EmptyTicket { .. })));
        assert!(matches!(clamp_topk(&d, 0.0), Err(Error::InvalidDensity(_))));
    }

    #[test]
    fn file_round_trip_and_validation() {
        let d = dist(&[0.9, 0.1, 0.5, 0.7]);
        let t = clamp_topk(&d, 0.5).unwrap();
        let text = t.to_json();
        assert!(text.contains("\"retained\""));
        assert_eq!(Ticket::from_json(&text).unwrap(), t);
        let bad = text.replace("\"version\": 1", "\"version\": 9");
        assert!(Ticket::from_json(&bad).is_err());
    }

    proptest! {
        #[test]
        fn clamp_density_is_rounded_kappa(
            logits in prop::collection::vec(-5.0f64..5.0, 1..300),
            kappa in 0.001f64..=1.0,
        ) {
            let d = logits.len();
            let dist = MaskDistribution { logits, tau: 2.0 / 3.0, layout: MaskLayout::flat(d) };
            match clamp_topk(&dist, kappa) {
                Ok(t) => {
                    let n = (kappa * d as f64 + 0.5).floor() as usize;
                    prop_assert_eq!(t.retained(), n);
                    prop_assert_eq!(t.density, n as f64 / d as f64);
                    let inv = invert_clamp(&dist, kappa).unwrap();
                    prop_assert_eq!(inv.retained(), n);
                }
                Err(Error::EmptyTicket { .. }) => prop_assert!(kappa * (d as f64) < 0.5),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn ticket_file_round_trips(bits in prop::collection::vec(any::<bool>(), 1..200)) {
            let d = bits.len();
            let t = Ticket::new(bits, MaskLayout::flat(d), 0.5, "random").unwrap();
            prop_assert_eq!(Ticket::from_json(&t.to_json()).unwrap(), t);
        }
    }
}
