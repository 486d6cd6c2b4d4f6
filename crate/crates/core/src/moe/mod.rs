//! Mixture-of-experts routing, capacity-bounded dispatch, expert combine and
//! the load-balance loss.

mod balance;
mod layer;
mod report;
mod routing;

pub use balance::{balance_loss, balance_loss_from_stats, balance_loss_on_tape};
pub use layer::{
    combine, feed_forward, moe_forward, route_on_tape, Activation, CombineWeights, ExpertParams, ExpertVars,
    MoeSettings, RouterParams, RoutingPlan,
};
pub use report::{routing_report, RoutingRecord, RoutingReport};
pub use routing::{buffer_capacity, dispatch_with_capacity, route, top_k_indices, RoutingOutcome};
