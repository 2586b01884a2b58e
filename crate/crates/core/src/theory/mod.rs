//! Two-layer BN regression networks and their NTK Gram matrices.
//!
//! The online network shares its first-layer directions `v_k` across
//! clients and personalizes the BN scales `γ_{k,i}`; the offline network
//! personalizes everything. Client `i` normalizes pre-activations by the
//! `S_i`-norm of `v_k`. The auxiliary Gram matrices are estimated by Monte
//! Carlo, with the offline estimate reusing the online draws so that it is
//! exactly the block-diagonal restriction of the online one.

mod gram;
mod net;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gram::{
    block_mask, estimate_gram_voff, estimate_gram_von, estimate_grams, gram_time_t, perp_projection,
    verify_gram_ordering, GramEstimate, GramKind, Instance, GramCheckReport, TrialReport, MC_SHARDS,
};
pub use net::{
    forward_theory, init_theory_net, mse_loss, NetKind, Prediction, TheoryData, TwoLayerBnNet,
};
pub use train::{train_on_data, train_theory_trajectories, Trajectories, DIVERGENCE_FACTOR};

/// Tolerance of the deterministic eigenvalue comparisons.
pub const EIG_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub n_clients: usize,
    /// Training samples per client.
    pub m_per_client: usize,
    pub d: usize,
    /// Hidden width.
    pub width: usize,
    pub alpha: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.m_per_client == 0 || self.width == 0 {
            return Err(Error::Config("N, M and width must be at least 1".into()));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("d must be at least 2, got {}", self.d)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.mc_samples < 1000 {
            return Err(Error::Config(format!(
                "mc_samples must be at least 1000, got {}",
                self.mc_samples
            )));
        }
        Ok(())
    }
}
