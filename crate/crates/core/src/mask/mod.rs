//! The probabilistic mask: retention logits, relaxed sampling, expected
//! density, the sparsity constraint, and conversion to a binary ticket.

mod distribution;
mod layout;
mod ticket;

pub use distribution::{
    init_distribution, logistic_noise, logit, MaskDistribution, SoftMask, DEFAULT_TAU,
};
pub use layout::{MaskLayout, Segment};
pub use ticket::{
    clamp_topk, invert_clamp, rank_descending, retained_count, select, Ticket, TicketFile,
    TICKET_FORMAT_VERSION,
};
