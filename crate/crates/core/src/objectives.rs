//! Differentiable pruning objectives. Each is evaluated on a student (the
//! overlaid network) and, for teacher-comparing kinds, constant statistics of
//! the dense teacher on the same batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{GraphPass, ModelState, Overlay};
use crate::tensor::{Graph, Tensor, Var};

/// Variance guard inside the per-layer normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Teacher losses below this make the relative loss change meaningless.
pub const MIN_TEACHER_LOSS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "loss")]
    TaskLoss,
    #[serde(rename = "dloss")]
    RelLossChange,
    #[serde(rename = "gradnorm")]
    NegGradNorm,
    #[serde(rename = "kl")]
    ReverseKl,
    #[serde(rename = "feature")]
    FeatureMatch,
    #[serde(rename = "grad")]
    GradMatch,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        ObjectiveKind::TaskLoss,
        ObjectiveKind::RelLossChange,
        ObjectiveKind::NegGradNorm,
        ObjectiveKind::ReverseKl,
        ObjectiveKind::FeatureMatch,
        ObjectiveKind::GradMatch,
    ];

    /// Short tag used on the command line and in configs.
    pub fn tag(&self) -> &'static str {
        match self {
            ObjectiveKind::TaskLoss => "loss",
            ObjectiveKind::RelLossChange => "dloss",
            ObjectiveKind::NegGradNorm => "gradnorm",
            ObjectiveKind::ReverseKl => "kl",
            ObjectiveKind::FeatureMatch => "feature",
            ObjectiveKind::GradMatch => "grad",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::TaskLoss => "task_loss",
            ObjectiveKind::RelLossChange => "rel_loss_change",
            ObjectiveKind::NegGradNorm => "neg_grad_norm",
            ObjectiveKind::ReverseKl => "reverse_kl",
            ObjectiveKind::FeatureMatch => "feature_match",
            ObjectiveKind::GradMatch => "grad_match",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, ObjectiveKind::TaskLoss | ObjectiveKind::NegGradNorm)
    }

    pub fn needs_student_grads(&self) -> bool {
        matches!(self, ObjectiveKind::NegGradNorm | ObjectiveKind::GradMatch)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .iter()
            .find(|k| k.tag() == s || k.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

/// Constant statistics of the dense network on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStats {
    pub logits: Tensor,
    pub log_probs: Tensor,
    pub features: Vec<Tensor>,
    pub loss: f64,
    /// Loss gradients per maskable tensor; empty unless requested.
    pub grads: Vec<Tensor>,
}

pub fn teacher_stats(model: &ModelState, batch: &Batch, with_grads: bool) -> Result<TeacherStats> {
    let graph = Graph::new();
    let pass = model.forward_graph(&graph, batch, Overlay::None, with_grads)?;
    let grads = if with_grads {
        graph
            .grad(pass.loss, &pass.effective, false)?
            .iter()
            .map(|g| (*g.value()).clone())
            .collect()
    } else {
        Vec::new()
    };
    Ok(TeacherStats {
        logits: (*pass.logits.value()).clone(),
        log_probs: (*pass.logits.log_softmax()?.value()).clone(),
        features: pass.features.iter().map(|f| (*f.value()).clone()).collect(),
        loss: pass.loss.item(),
        grads,
    })
}

/// `|L / L_dense − 1|` with the teacher loss held constant.
pub fn rel_loss_change<'g>(student_loss: Var<'g>, teacher_loss: f64) -> Result<Var<'g>> {
    if teacher_loss < MIN_TEACHER_LOSS {
        return Err(Error::DegenerateTeacherLoss(teacher_loss));
    }
    let t = student_loss.graph().constant(Tensor::scalar(teacher_loss));
    student_loss.div(t)?.add_scalar(-1.0)?.abs()
}

/// Batch mean of `Σ p_s (log p_s − log p_t)`.
pub fn reverse_kl<'g>(student_logits: Var<'g>, teacher_log_probs: &Tensor) -> Result<Var<'g>> {
    let b = student_logits.shape()[0] as f64;
    let ls = student_logits.log_softmax()?;
    let lt = student_logits.graph().constant(teacher_log_probs.clone());
    ls.exp()?.mul(ls.sub(lt)?)?.sum()?.scale(1.0 / b)
}

/// `(X − mean X) / sqrt(var X + δ)` over all entries jointly.
pub fn normalize<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let centered = x.sub(x.mean()?)?;
    let var = centered.square()?.mean()?;
    centered.div(var.add_scalar(NORM_EPS)?.sqrt()?)
}

pub fn mse<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    a.sub(b)?.square()?.mean()
}

/// Mean over layers of the MSE between normalized tensors.
fn normalized_layer_mse<'g>(student: &[Var<'g>], teacher: &[Tensor]) -> Result<Var<'g>> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::LayerCountMismatch {
            student: student.len(),
            teacher: teacher.len(),
        });
    }
    let graph = student[0].graph();
    let mut total: Option<Var<'g>> = None;
    for (s, t) in student.iter().zip(teacher) {
        let tn = normalize(graph.constant(t.clone()))?;
        let term = mse(normalize(*s)?, tn)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    total.expect("non-empty").scale(1.0 / student.len() as f64)
}

pub fn feature_match<'g>(student: &[Var<'g>], teacher: &[Tensor]) -> Result<Var<'g>> {
    normalized_layer_mse(student, teacher)
}

pub fn grad_match<'g>(student_grads: &[Var<'g>], teacher_grads: &[Tensor]) -> Result<Var<'g>> {
    normalized_layer_mse(student_grads, teacher_grads)
}

/// `−‖g‖₂` over the concatenation of `grads`.
pub fn neg_grad_norm<'g>(grads: &[Var<'g>]) -> Result<Var<'g>> {
    let graph = grads
        .first()
        .ok_or(Error::Unsupported("gradient norm of an empty parameter set"))?
        .graph();
    let mut total = graph.constant(Tensor::scalar(0.0));
    for g in grads {
        total = total.add(g.square()?.sum()?)?;
    }
    if total.item() == 0.0 {
        // sqrt is not differentiable at zero; a vanishing gradient has no
        // useful direction anyway.
        return Ok(graph.constant(Tensor::scalar(0.0)));
    }
    total.sqrt()?.neg()
}

/// The objective on a recorded student pass. Kinds that need student
/// gradients differentiate the loss with respect to the effective weights
/// with `create_graph`, so the result stays differentiable in the overlay.
pub fn objective_on_pass<'g>(
    kind: ObjectiveKind,
    pass: &GraphPass<'g>,
    teacher: Option<&TeacherStats>,
) -> Result<Var<'g>> {
    let teacher = if kind.needs_teacher() {
        Some(teacher.ok_or(Error::Unsupported("objective needs teacher statistics"))?)
    } else {
        None
    };
    let student_grads = || -> Result<Vec<Var<'g>>> {
        let tracked: Vec<Var<'g>> = pass.effective.iter().copied().filter(|e| e.is_tracked()).collect();
        if tracked.len() != pass.effective.len() {
            return Err(Error::Unsupported("student gradients need a tracked overlay or parameters"));
        }
        pass.loss.graph().grad(pass.loss, &pass.effective, true)
    };
    match kind {
        ObjectiveKind::TaskLoss => Ok(pass.loss),
        ObjectiveKind::RelLossChange => rel_loss_change(pass.loss, teacher.expect("teacher").loss),
        ObjectiveKind::NegGradNorm => neg_grad_norm(&student_grads()?),
        ObjectiveKind::ReverseKl => reverse_kl(pass.logits, &teacher.expect("teacher").log_probs),
        ObjectiveKind::FeatureMatch => feature_match(&pass.features, &teacher.expect("teacher").features),
        ObjectiveKind::GradMatch => {
            let t = teacher.expect("teacher");
            if t.grads.is_empty() {
                return Err(Error::Unsupported("teacher statistics were captured without gradients"));
            }
            grad_match(&student_grads()?, &t.grads)
        }
    }
}

/// Value of the objective for a fixed overlay (binary or soft), without any
/// Concrete noise.
pub fn objective_value(
    kind: ObjectiveKind,
    model: &ModelState,
    batch: &Batch,
    overlay: Option<&[f64]>,
    teacher: Option<&TeacherStats>,
) -> Result<f64> {
    let graph = Graph::new();
    let ov = overlay.map_or(Overlay::None, Overlay::Values);
    let pass = model.forward_graph(&graph, batch, ov, kind.needs_student_grads())?;
    Ok(objective_on_pass(kind, &pass, teacher)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{stream_rng, synthetic_blobs, BlobSpec};
    use crate::nn::Arch;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn setup(arch: Arch) -> (ModelState, Batch) {
        let spec = BlobSpec::new(4, 16, 200, 3);
        let spec = if arch.needs_images() {
            spec.with_image_shape([1, 4, 4])
        } else {
            spec
        };
        let data = synthetic_blobs(&spec).unwrap();
        let model = ModelState::for_dataset(arch, &data, 5).unwrap();
        let idx: Vec<usize> = (0..24).collect();
        (model, data.batch(&data.train, &idx))
    }

    #[test]
    fn tags_round_trip() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.tag().parse::<ObjectiveKind>().unwrap(), k);
            assert_eq!(k.name().parse::<ObjectiveKind>().unwrap(), k);
        }
        assert!(!ObjectiveKind::TaskLoss.needs_teacher());
        assert!(!ObjectiveKind::NegGradNorm.needs_teacher());
        assert!(ObjectiveKind::GradMatch.needs_student_grads());
        assert!(!ObjectiveKind::ReverseKl.needs_student_grads());
    }

    #[test]
    fn uniform_logits_task_loss() {
        let g = Graph::new();
        let logits = g.param(Tensor::zeros(&[3, 4]));
        let loss = crate::nn::cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rel_loss_change_examples() {
        let g = Graph::new();
        let l = |v: f64| g.param(Tensor::scalar(v));
        assert_eq!(rel_loss_change(l(0.7), 0.7).unwrap().item(), 0.0);
        assert!((rel_loss_change(l(1.4), 0.7).unwrap().item() - 1.0).abs() < 1e-15);
        assert!((rel_loss_change(l(0.35), 0.7).unwrap().item() - 0.5).abs() < 1e-15);
        assert!(matches!(
            rel_loss_change(l(0.3), 1e-13),
            Err(Error::DegenerateTeacherLoss(_))
        ));
    }

    #[test]
    fn reverse_kl_closed_form() {
        let g = Graph::new();
        let student = g.param(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let t = Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let kl = reverse_kl(student, &t).unwrap().item();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn feature_match_hand_value() {
        // N([1,2,3]) = [-a, 0, a] with a = 1/sqrt(2/3 + δ); the reversed
        // sequence gives [a, 0, -a], so the MSE is (4a² + 0 + 4a²) / 3.
        let g = Graph::new();
        let s = g.param(Tensor::vector(vec![3.0, 2.0, 1.0]));
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let v = feature_match(&[s], &[t]).unwrap().item();
        let a2 = 1.0 / (2.0 / 3.0 + NORM_EPS);
        assert!((v - 8.0 * a2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn feature_match_is_affine_invariant_and_checks_layers() {
        let g = Graph::new();
        let t = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        // Scale large enough that the δ guard is negligible.
        let s = g.param(t.map(|v| 1e3 * v + 7.0));
        assert!(feature_match(&[s], std::slice::from_ref(&t)).unwrap().item() < 1e-9);
        assert!(matches!(
            feature_match(&[s], &[t.clone(), t]),
            Err(Error::LayerCountMismatch { student: 1, teacher: 2 })
        ));
    }

    #[test]
    fn grad_match_is_scale_invariant_in_teacher() {
        let g = Graph::new();
        let s = g.param(Tensor::vector(vec![0.5, -0.25, 1.0]));
        let t = Tensor::vector(vec![1.0, 3.0, -2.0]);
        let a = grad_match(&[s], std::slice::from_ref(&t)).unwrap().item();
        let b = grad_match(&[s], &[t.map(|v| 1e3 * v)]).unwrap().item();
        assert!((a - b).abs() < 1e-5 * a.abs());
    }

    #[test]
    fn neg_grad_norm_quadratic_toy() {
        // L(w) = ½ (w₀² + 3 w₁²) at (1, 2): ∇ = (1, 6).
        let g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![0.5, 1.5]));
        let loss = w.square().unwrap().mul(c).unwrap().sum().unwrap();
        let grads = g.grad(loss, &[w], true).unwrap();
        let v = neg_grad_norm(&grads).unwrap().item();
        assert!((v + 37f64.sqrt()).abs() < 1e-12);
        // Homogeneity: scaling the loss scales the value.
        let grads2 = g.grad(loss.scale(3.0).unwrap(), &[w], true).unwrap();
        assert!((neg_grad_norm(&grads2).unwrap().item() - 3.0 * v).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_gives_zero_norm() {
        let g = Graph::new();
        let z = g.param(Tensor::zeros(&[3]));
        assert_eq!(neg_grad_norm(&[z]).unwrap().item(), 0.0);
    }

    #[test]
    fn ones_overlay_zero_points_are_exact() {
        for arch in [Arch::Mlp2x256, Arch::LenetConv4, Arch::ResnetTiny] {
            let (model, batch) = setup(arch);
            let teacher = teacher_stats(&model, &batch, true).unwrap();
            let ones = vec![1.0; model.d()];
            for kind in [
                ObjectiveKind::RelLossChange,
                ObjectiveKind::ReverseKl,
                ObjectiveKind::FeatureMatch,
                ObjectiveKind::GradMatch,
            ] {
                let v = objective_value(kind, &model, &batch, Some(&ones), Some(&teacher)).unwrap();
                assert_eq!(v, 0.0, "{arch} {kind}");
            }
            let task = objective_value(ObjectiveKind::TaskLoss, &model, &batch, Some(&ones), None).unwrap();
            assert_eq!(task, teacher.loss);
        }
    }

    #[test]
    fn objectives_are_finite_on_random_masks() {
        let (model, batch) = setup(Arch::Mlp2x256);
        let teacher = teacher_stats(&model, &batch, true).unwrap();
        let mut rng = stream_rng(8, 8);
        for trial in 0..20 {
            let p = [0.0, 0.01, 0.3, 0.9][trial % 4];
            let mask: Vec<f64> = (0..model.d()).map(|_| rng.gen_bool(p) as u8 as f64).collect();
            for kind in ObjectiveKind::ALL {
                match objective_value(kind, &model, &batch, Some(&mask), Some(&teacher)) {
                    Ok(v) => assert!(v.is_finite()),
                    Err(e) => panic!("{kind} at density {p}: {e}"),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn reverse_kl_is_nonnegative(
            s in prop::collection::vec(-20.0f64..20.0, 6),
            t in prop::collection::vec(-20.0f64..20.0, 6),
        ) {
            let g = Graph::new();
            let student = g.param(Tensor::new(vec![2, 3], s).unwrap());
            let tl = g.constant(Tensor::new(vec![2, 3], t).unwrap()).log_softmax().unwrap();
            let kl = reverse_kl(student, &tl.value()).unwrap().item();
            prop_assert!(kl >= -1e-12);
        }
    }

    #[test]
    fn soft_mask_gradients_match_finite_differences() {
        use crate::mask::{init_distribution, logistic_noise};
        let spec = BlobSpec::new(3, 6, 120, 1);
        let data = synthetic_blobs(&spec).unwrap();
        let model = ModelState::build(Arch::Mlp2x256, &[6], 3, 2).unwrap();
        let batch = data.batch(&data.train, &(0..16).collect::<Vec<_>>());
        let teacher = teacher_stats(&model, &batch, true).unwrap();
        let mut dist = init_distribution(model.layout(), 0.5, 2.0 / 3.0).unwrap();
        let mut rng = stream_rng(3, 3);
        for l in dist.logits.iter_mut() {
            *l = rng.sample::<f64, _>(StandardNormal);
        }
        let noise = logistic_noise(dist.d(), 4, 0);
        let eval = |logits: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut d = dist.clone();
            d.logits = logits.to_vec();
            let g = Graph::new();
            let (leaves, masks) = d.soft_mask_vars(&g, &noise)?;
            let pass = model.forward_graph(&g, &batch, Overlay::Vars(&masks), false)?;
            let r = objective_on_pass(ObjectiveKind::ReverseKl, &pass, Some(&teacher))?;
            let grads = g.grad(r, &leaves, false)?;
            Ok((r.item(), grads.iter().flat_map(|v| v.value().data().to_vec()).collect()))
        };
        let (_, grad) = eval(&dist.logits).unwrap();
        let h = 1e-5;
        for j in [0, 7, 100, 6 * 256 + 3, dist.d() - 1] {
            let mut plus = dist.logits.clone();
            plus[j] += h;
            let mut minus = dist.logits.clone();
            minus[j] -= h;
            let fd = (eval(&plus).unwrap().0 - eval(&minus).unwrap().0) / (2.0 * h);
            let tol = 1e-3 * fd.abs().max(1e-8);
            assert!((fd - grad[j]).abs() <= tol, "j={j} fd={fd} ad={}", grad[j]);
        }
    }
}
