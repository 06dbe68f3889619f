//! Flow-guided sparse attention: key coordinate sets, the per-query and
//! windowed kernels, a dense masked reference, and cost accounting.

mod cost;
mod diag;
mod engine;
mod keys;
pub mod oracle;
mod op;
mod params;

pub use cost::{mac_count, receptive_extent, AttentionKind};
pub use diag::{window_records, WindowRecord};
pub use engine::{fgs_msa, fgsw_msa, fgsw_msa_padded, fgsw_msa_with_stats, global_msa, AttentionStats};
pub use keys::{build_omega, build_psi, window_queries, Bounds, KeyCoord, KeyCoordSet, KeyOrigin, Window, WindowGrid};
pub use op::{fgsw_msa_var, AttentionVars};
pub use params::AttentionParams;
