use super::engine::{AttentionStats, FrameAttention, FrameInputs};
use super::params::AttentionParams;
use crate::error::{FgstError, Result};
use crate::flow::FlowSet;
use crate::numerics::{CustomOp, Graph, Tensor, Var};

/// Tape handles of the attention projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub heads: usize,
    pub u: Var,
    pub v: Var,
    pub value: Var,
    pub out: Var,
}

impl AttentionVars {
    pub fn params(&self, g: &Graph) -> Result<AttentionParams> {
        AttentionParams::new(
            self.heads,
            g.value(self.u).shape()[1] * self.heads,
            g.value(self.u).clone(),
            g.value(self.v).clone(),
            g.value(self.value).clone(),
            g.value(self.out).clone(),
        )
    }
}

struct FgswOp {
    forward: FrameAttention,
    params: AttentionParams,
    keys: usize,
}

impl CustomOp for FgswOp {
    fn name(&self) -> &'static str {
        "fgsw_msa"
    }

    fn backward(&self, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = self.forward.backward(&self.params, grad_out);
        let mut out = Vec::with_capacity(needs.len());
        out.push(Some(g.query));
        out.extend(g.keys.into_iter().map(Some));
        out.extend([Some(g.u), Some(g.v), Some(g.value), Some(g.out)]);
        debug_assert_eq!(out.len(), self.keys + 5);
        out.into_iter().zip(needs).map(|(g, &n)| if n { g } else { None }).collect()
    }
}

/// Windowed flow-guided attention recorded on the tape. `keys[f]` holds the
/// key features of frame `f`; only the temporal neighbours of `t` are needed.
#[allow(clippy::too_many_arguments)]
pub fn fgsw_msa_var(
    g: &mut Graph,
    query: Var,
    keys: &[Option<Var>],
    t: usize,
    flows: &FlowSet,
    vars: &AttentionVars,
    window: usize,
    r: usize,
) -> Result<(Var, AttentionStats)> {
    let params = vars.params(g)?;
    let key_values: Vec<Option<&Tensor>> = keys.iter().map(|k| k.map(|v| g.value(v))).collect();
    let forward = FrameAttention::forward(&FrameInputs {
        query: g.value(query),
        keys: &key_values,
        t,
        flows,
        params: &params,
        window,
        r,
    })?;
    let value = forward.output();
    let stats = forward.stats;
    let mut inputs = vec![query];
    for &f in forward.key_frames() {
        inputs.push(keys[f].ok_or_else(|| FgstError::InvalidArgument(format!("missing key frame {f}")))?);
    }
    let n_keys = inputs.len() - 1;
    inputs.extend([vars.u, vars.v, vars.value, vars.out]);
    let op = FgswOp {
        forward,
        params,
        keys: n_keys,
    };
    Ok((g.custom(&inputs, value, Box::new(op))?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::engine::fgsw_msa;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds loss = sum(attention(...) * weights) for a fixed random weighting.
    fn loss_of(
        frames: &[Tensor],
        params: &AttentionParams,
        weights: &Tensor,
        flows: &FlowSet,
        grads: bool,
    ) -> (f64, Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>) {
        let mut g = Graph::new();
        let fv: Vec<Var> = frames.iter().map(|f| g.param(f.clone())).collect();
        let vars = AttentionVars {
            heads: params.heads,
            u: g.param(params.u.clone()),
            v: g.param(params.v.clone()),
            value: g.param(params.value.clone()),
            out: g.param(params.out.clone()),
        };
        let keys: Vec<Option<Var>> = fv.iter().copied().map(Some).collect();
        let (y, _) = fgsw_msa_var(&mut g, fv[1], &keys, 1, flows, &vars, 3, 1).unwrap();
        let w = g.constant(weights.clone());
        let l = g.l1_loss(y, w).unwrap();
        let value = g.value(l).item().unwrap();
        if !grads {
            return (value, None);
        }
        let gr = g.backward(l).unwrap();
        let fg = fv.iter().map(|&v| gr.get(v).unwrap().to_vec()).collect();
        let pg = [vars.u, vars.v, vars.value, vars.out]
            .iter()
            .map(|&v| gr.get(v).unwrap().to_vec())
            .collect();
        (value, Some((fg, pg)))
    }

    #[test]
    fn tape_value_matches_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = AttentionParams::random(2, 4, &mut rng).unwrap();
        let frames: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[4, 5, 4], &mut rng)).collect();
        let flows = FlowSet::uniform(3, 5, 4, 1, (1.0, -1.0));
        let mut g = Graph::new();
        let fv: Vec<Option<Var>> = frames.iter().map(|f| Some(g.constant(f.clone()))).collect();
        let vars = AttentionVars {
            heads: 2,
            u: g.param(params.u.clone()),
            v: g.param(params.v.clone()),
            value: g.param(params.value.clone()),
            out: g.param(params.out.clone()),
        };
        let (y, _) = fgsw_msa_var(&mut g, fv[2].unwrap(), &fv, 2, &flows, &vars, 3, 1).unwrap();
        let want = fgsw_msa(&frames, 2, &flows, &params, 3, 1).unwrap();
        assert!(g.value(y).bit_eq(&want));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = AttentionParams::random(2, 4, &mut rng).unwrap();
        let frames: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[4, 4, 5], &mut rng)).collect();
        // L1 against a far-away target keeps every residual sign fixed
        let weights = Tensor::filled(&[4, 4, 5], 3.0);
        let flows = FlowSet::uniform(3, 4, 5, 1, (1.0, 1.0));
        let (_, grads) = loss_of(&frames, &params, &weights, &flows, true);
        let (fg, pg) = grads.unwrap();
        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-4);
            assert!(err < 1e-5, "analytic {analytic} fd {fd}");
        };
        for f in 0..3 {
            for idx in (0..frames[f].len()).step_by(7) {
                let mut a = frames.to_vec();
                a[f].data_mut()[idx] += h;
                let mut b = frames.to_vec();
                b[f].data_mut()[idx] -= h;
                check(
                    fg[f][idx],
                    loss_of(&a, &params, &weights, &flows, false).0,
                    loss_of(&b, &params, &weights, &flows, false).0,
                );
            }
        }
        for (k, name) in ["u", "v", "value", "out"].iter().enumerate() {
            for idx in (0..16).step_by(3) {
                let bump = |s: f64| {
                    let mut p = params.clone();
                    let t = match *name {
                        "u" => &mut p.u,
                        "v" => &mut p.v,
                        "value" => &mut p.value,
                        _ => &mut p.out,
                    };
                    t.data_mut()[idx] += s;
                    loss_of(&frames, &p, &weights, &flows, false).0
                };
                check(pg[k][idx], bump(h), bump(-h));
            }
        }
    }
}
