use std::fmt;
use std::str::FromStr;

use super::engine::{FrameAttention, FrameInputs};
use super::keys::KeyCoord;
use super::params::AttentionParams;
use crate::error::{FgstError, Result};
use crate::flow::FlowSet;
use crate::numerics::Tensor;

/// Attention received by each key of one window, averaged over the window's
/// queries and heads.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowRecord {
    pub t: usize,
    pub center: (usize, usize),
    pub keys: Vec<KeyCoord>,
    pub weights: Vec<f64>,
}

impl fmt::Display for WindowRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} |", self.t, self.center.0, self.center.1)?;
        for k in &self.keys {
            write!(f, " {},{},{}", k.frame, k.row, k.col)?;
        }
        write!(f, " |")?;
        for w in &self.weights {
            write!(f, " {w:e}")?;
        }
        Ok(())
    }
}

fn bad(line: &str) -> FgstError {
    FgstError::Format(format!("malformed attention record: {line:?}"))
}

impl FromStr for WindowRecord {
    type Err = FgstError;

    fn from_str(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split('|').collect();
        let [head, keys, weights] = parts.as_slice() else {
            return Err(bad(line));
        };
        let nums: Vec<usize> = head
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(line)))
            .collect::<Result<_>>()?;
        let [t, cy, cx] = nums.as_slice() else {
            return Err(bad(line));
        };
        let keys: Vec<KeyCoord> = keys
            .split_whitespace()
            .map(|s| {
                let v: Vec<usize> = s.split(',').map(|x| x.parse().map_err(|_| bad(line))).collect::<Result<_>>()?;
                match v.as_slice() {
                    [f, r, c] => Ok(KeyCoord::new(*f, *r, *c)),
                    _ => Err(bad(line)),
                }
            })
            .collect::<Result<_>>()?;
        let weights: Vec<f64> = weights
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(line)))
            .collect::<Result<_>>()?;
        if weights.len() != keys.len() {
            return Err(bad(line));
        }
        Ok(Self {
            t: *t,
            center: (*cy, *cx),
            keys,
            weights,
        })
    }
}

/// Per-window attention records for reference frame `t`.
pub fn window_records(
    features: &[Tensor],
    t: usize,
    flows: &FlowSet,
    params: &AttentionParams,
    window: usize,
    r: usize,
) -> Result<Vec<WindowRecord>> {
    let query = features
        .get(t)
        .ok_or_else(|| FgstError::InvalidArgument(format!("frame {t} outside a {}-frame sequence", features.len())))?;
    let keys: Vec<Option<&Tensor>> = features.iter().map(Some).collect();
    let fa = FrameAttention::forward(&FrameInputs {
        query,
        keys: &keys,
        t,
        flows,
        params,
        window,
        r,
    })?;
    Ok(fa
        .window_weights(params.heads)
        .into_iter()
        .map(|(set, weights)| {
            let center = match set.origin() {
                super::keys::KeyOrigin::Window { row, col, .. } => (row, col),
                super::keys::KeyOrigin::Query { row, col, .. } => (row, col),
            };
            WindowRecord {
                t,
                center,
                keys: set.coords().to_vec(),
                weights,
            }
        })
        .collect())
}
