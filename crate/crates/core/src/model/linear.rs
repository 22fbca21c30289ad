//! Frozen linear maps with an optional trainable adapter, and the two
//! structural fusion rules that fold the adapter back into the frozen weight.

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

use super::config::AdapterKind;

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    /// Low-rank delta `A @ B` with `a: [out, r]`, `b: [r, in]`.
    Parallel { a: Tensor, b: Tensor },
    /// Down-projection `[r, in] + [r]`, then a group-wise up-projection stored
    /// as `[g, in/g, r/g]` blocks plus `[in]` bias.
    Sequential {
        down_w: Tensor,
        down_b: Tensor,
        up_w: Tensor,
        up_b: Tensor,
    },
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Parallel { .. } => AdapterKind::ParallelLowRank,
            Adapter::Sequential { .. } => AdapterKind::SequentialRep,
        }
    }

    pub fn groups(&self) -> usize {
        match self {
            Adapter::Parallel { .. } => 1,
            Adapter::Sequential { up_w, .. } => up_w.dims()[0],
        }
    }
}

/// A frozen `y = x W0^T + b0` map, optionally carrying an adapter, or in its
/// fused form carrying only `(W_eff, b_eff)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWithAdapter {
    pub w0: Tensor,
    pub b0: Tensor,
    pub adapter: Option<Adapter>,
    pub fused: Option<(Tensor, Tensor)>,
}

impl LinearWithAdapter {
    pub fn out_dim(&self) -> usize {
        self.w0.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w0.dims()[1]
    }

    pub fn is_fused(&self) -> bool {
        self.fused.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let (out, inp) = match self.w0.dims() {
            [o, i] => (*o, *i),
            d => return Err(Error::dim("linear", format!("weight {d:?} is not a matrix"))),
        };
        if self.b0.dims() != [out] {
            return Err(Error::dim("linear", format!("bias {:?} for {out} outputs", self.b0.dims())));
        }
        match &self.adapter {
            None => {}
            Some(Adapter::Parallel { a, b }) => {
                let r = b.dims().first().copied().unwrap_or(0);
                if a.dims() != [out, r] || b.dims() != [r, inp] {
                    return Err(Error::dim(
                        "parallel adapter",
                        format!("a {:?}, b {:?} for weight [{out}, {inp}]", a.dims(), b.dims()),
                    ));
                }
            }
            Some(Adapter::Sequential {
                down_w,
                down_b,
                up_w,
                up_b,
            }) => {
                let r = down_w.dims().first().copied().unwrap_or(0);
                let g = up_w.dims().first().copied().unwrap_or(0);
                if g == 0 || inp % g != 0 || r % g != 0 {
                    return Err(Error::dim(
                        "sequential adapter",
                        format!("{g} groups do not divide in {inp} and rank {r}"),
                    ));
                }
                if down_w.dims() != [r, inp]
                    || down_b.dims() != [r]
                    || up_w.dims() != [g, inp / g, r / g]
                    || up_b.dims() != [inp]
                {
                    return Err(Error::dim(
                        "sequential adapter",
                        format!(
                            "down {:?}+{:?}, up {:?}+{:?} for input {inp}",
                            down_w.dims(),
                            down_b.dims(),
                            up_w.dims(),
                            up_b.dims()
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Loads the layer stored under `names`.
    pub fn extract(store: &ParamStore, names: &SiteNames) -> Result<Self> {
        let w0 = store.get(&names.weight)?.clone();
        let b0 = store.get(&names.bias)?.clone();
        let adapter = if store.contains(&names.lora_a) {
            Some(Adapter::Parallel {
                a: store.get(&names.lora_a)?.clone(),
                b: store.get(&names.lora_b)?.clone(),
            })
        } else if store.contains(&names.down_w) {
            Some(Adapter::Sequential {
                down_w: store.get(&names.down_w)?.clone(),
                down_b: store.get(&names.down_b)?.clone(),
                up_w: store.get(&names.up_w)?.clone(),
                up_b: store.get(&names.up_b)?.clone(),
            })
        } else {
            None
        };
        let layer = LinearWithAdapter {
            w0,
            b0,
            adapter,
            fused: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Evaluates the layer outside any training graph.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut store = ParamStore::new();
        let names = SiteNames::new("layer", "linear");
        self.install(&mut store, &names, false)?;
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let y = apply_site(&mut g, &store, &names, xv, None)?;
        Ok(g.value(y))
    }

    /// Writes the layer into `store`. A fused layer is written as a plain
    /// linear map under the weight/bias names with no adapter entries.
    pub fn install(&self, store: &mut ParamStore, names: &SiteNames, adapter_trainable: bool) -> Result<()> {
        for n in names.adapter_names() {
            store.remove(&n);
        }
        if let Some((w, b)) = &self.fused {
            store.set(&names.weight, w.clone(), false);
            store.set(&names.bias, b.clone(), false);
            return Ok(());
        }
        store.set(&names.weight, self.w0.clone(), false);
        store.set(&names.bias, self.b0.clone(), false);
        match &self.adapter {
            None => {}
            Some(Adapter::Parallel { a, b }) => {
                store.set(&names.lora_a, a.clone(), adapter_trainable);
                store.set(&names.lora_b, b.clone(), adapter_trainable);
            }
            Some(Adapter::Sequential {
                down_w,
                down_b,
                up_w,
                up_b,
            }) => {
                store.set(&names.down_w, down_w.clone(), adapter_trainable);
                store.set(&names.down_b, down_b.clone(), adapter_trainable);
                store.set(&names.up_w, up_w.clone(), adapter_trainable);
                store.set(&names.up_b, up_b.clone(), adapter_trainable);
            }
        }
        Ok(())
    }
}

/// Folds a parallel low-rank adapter: `W_eff = W0 + A B`, `b_eff = b0`.
pub fn fuse_parallel_lowrank(layer: &LinearWithAdapter) -> Result<LinearWithAdapter> {
    if layer.is_fused() {
        return Err(Error::contract("layer is already fused"));
    }
    layer.validate()?;
    let Some(Adapter::Parallel { a, b }) = &layer.adapter else {
        return Err(Error::contract("fuse_parallel_lowrank needs a parallel low-rank adapter"));
    };
    let (out, inp) = (layer.out_dim(), layer.in_dim());
    let r = b.dims()[0];
    let delta = matmul_f64(&to_f64(a.data()), &to_f64(b.data()), out, r, inp);
    let w_eff: Vec<f32> = layer
        .w0
        .data()
        .iter()
        .zip(&delta)
        .map(|(&w, &d)| (w as f64 + d) as f32)
        .collect();
    Ok(LinearWithAdapter {
        fused: Some((Tensor::new(vec![out, inp], w_eff)?, layer.b0.clone())),
        ..layer.clone()
    })
}

/// Folds a sequential adapter in two steps: first the adapter collapses to
/// `W_ada = Wu Wd`, `b_ada = Wu bd + bu`; then
/// `W_eff = W0 (I + W_ada)`, `b_eff = W0 b_ada + b0`.
pub fn fuse_sequential_rep(layer: &LinearWithAdapter) -> Result<LinearWithAdapter> {
    if layer.is_fused() {
        return Err(Error::contract("layer is already fused"));
    }
    layer.validate()?;
    let Some(Adapter::Sequential {
        down_w,
        down_b,
        up_w,
        up_b,
    }) = &layer.adapter
    else {
        return Err(Error::contract("fuse_sequential_rep needs a sequential adapter"));
    };
    let (out, inp) = (layer.out_dim(), layer.in_dim());
    let r = down_w.dims()[0];
    let up = expand_groupwise(up_w)?;
    let w_ada = matmul_f64(&up, &to_f64(down_w.data()), inp, r, inp);
    let mut b_ada = matmul_f64(&up, &to_f64(down_b.data()), inp, r, 1);
    for (x, &b) in b_ada.iter_mut().zip(up_b.data()) {
        *x += b as f64;
    }
    let mut i_plus = w_ada;
    for i in 0..inp {
        i_plus[i * inp + i] += 1.0;
    }
    let w0 = to_f64(layer.w0.data());
    let w_eff = matmul_f64(&w0, &i_plus, out, inp, inp);
    let b_eff: Vec<f32> = matmul_f64(&w0, &b_ada, out, inp, 1)
        .iter()
        .zip(layer.b0.data())
        .map(|(&x, &b)| (x + b as f64) as f32)
        .collect();
    Ok(LinearWithAdapter {
        fused: Some((
            Tensor::new(vec![out, inp], w_eff.iter().map(|&x| x as f32).collect())?,
            Tensor::new(vec![out], b_eff)?,
        )),
        ..layer.clone()
    })
}

/// Dispatches on the adapter kind. A layer without an adapter fuses to its
/// own frozen weights.
pub fn fuse_layer(layer: &LinearWithAdapter) -> Result<LinearWithAdapter> {
    match &layer.adapter {
        Some(Adapter::Parallel { .. }) => fuse_parallel_lowrank(layer),
        Some(Adapter::Sequential { .. }) => fuse_sequential_rep(layer),
        None => {
            if layer.is_fused() {
                return Err(Error::contract("layer is already fused"));
            }
            Ok(LinearWithAdapter {
                fused: Some((layer.w0.clone(), layer.b0.clone())),
                ..layer.clone()
            })
        }
    }
}

/// Block-diagonal `[in, r]` matrix from `[g, in/g, r/g]` blocks.
pub fn expand_groupwise(up_w: &Tensor) -> Result<Vec<f64>> {
    let &[g, og, rg] = up_w.dims() else {
        return Err(Error::dim("expand_groupwise", format!("{:?}", up_w.dims())));
    };
    let (inp, r) = (g * og, g * rg);
    let mut dense = vec![0.0; inp * r];
    for grp in 0..g {
        for i in 0..og {
            for j in 0..rg {
                dense[(grp * og + i) * r + grp * rg + j] = up_w.data()[(grp * og + i) * rg + j] as f64;
            }
        }
    }
    Ok(dense)
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    crate::autodiff::kernels::mm(a, b, m, k, n, &mut out);
    out
}

/// Store names for one adapter-injected linear map.
#[derive(Debug, Clone)]
pub struct SiteNames {
    pub weight: String,
    pub bias: String,
    pub lora_a: String,
    pub lora_b: String,
    pub down_w: String,
    pub down_b: String,
    pub up_w: String,
    pub up_b: String,
}

impl SiteNames {
    pub fn new(prefix: &str, linear: &str) -> Self {
        SiteNames {
            weight: format!("{prefix}.{linear}.weight"),
            bias: format!("{prefix}.{linear}.bias"),
            lora_a: format!("{prefix}.adapter.a"),
            lora_b: format!("{prefix}.adapter.b"),
            down_w: format!("{prefix}.adapter.down.weight"),
            down_b: format!("{prefix}.adapter.down.bias"),
            up_w: format!("{prefix}.adapter.up.weight"),
            up_b: format!("{prefix}.adapter.up.bias"),
        }
    }

    pub fn adapter_names(&self) -> [String; 6] {
        [
            self.lora_a.clone(),
            self.lora_b.clone(),
            self.down_w.clone(),
            self.down_b.clone(),
            self.up_w.clone(),
            self.up_b.clone(),
        ]
    }
}

/// `x W^T + b` for a `[out, in]` weight.
pub(crate) fn plain_linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = g.transpose_last2(w)?;
    let y = g.matmul(x, wt)?;
    g.add(y, b)
}

/// Adapter hidden-activation dropout: rate and stream.
pub(crate) type HiddenDropout<'a> = Option<(f64, &'a mut StreamRng)>;

/// Applies the map stored under `names`, routing through whichever adapter is
/// present. Dropout, when given, acts on the adapter's rank-`r` activations.
pub(crate) fn apply_site(
    g: &mut Graph,
    store: &ParamStore,
    names: &SiteNames,
    x: Var,
    dropout: HiddenDropout<'_>,
) -> Result<Var> {
    let w = g.param(store, &names.weight)?;
    let b = g.param(store, &names.bias)?;
    if store.contains(&names.lora_a) {
        let a = g.param(store, &names.lora_a)?;
        let down = g.param(store, &names.lora_b)?;
        let base = plain_linear(g, x, w, b)?;
        let down_t = g.transpose_last2(down)?;
        let mut h = g.matmul(x, down_t)?;
        if let Some((p, rng)) = dropout {
            h = g.dropout(h, p, rng)?;
        }
        let a_t = g.transpose_last2(a)?;
        let delta = g.matmul(h, a_t)?;
        g.add(base, delta)
    } else if store.contains(&names.down_w) {
        let dw = g.param(store, &names.down_w)?;
        let db = g.param(store, &names.down_b)?;
        let uw = g.param(store, &names.up_w)?;
        let ub = g.param(store, &names.up_b)?;
        let mut h = plain_linear(g, x, dw, db)?;
        if let Some((p, rng)) = dropout {
            h = g.dropout(h, p, rng)?;
        }
        let up = grouped_up(g, h, uw)?;
        let up = g.add(up, ub)?;
        let xa = g.add(x, up)?;
        plain_linear(g, xa, w, b)
    } else {
        plain_linear(g, x, w, b)
    }
}

/// Group-wise projection of `h: [.., r]` by blocks `[g, in/g, r/g]`.
fn grouped_up(g: &mut Graph, h: Var, uw: Var) -> Result<Var> {
    let &[groups, og, rg] = g.dims(uw) else {
        return Err(Error::dim("grouped_up", format!("{:?}", g.dims(uw))));
    };
    let hd = g.dims(h).to_vec();
    let lead: usize = hd[..hd.len() - 1].iter().product();
    if groups == 1 {
        let w = g.reshape(uw, &[og, rg])?;
        let wt = g.transpose_last2(w)?;
        return g.matmul(h, wt);
    }
    let hg = g.reshape(h, &[lead, groups, rg])?;
    let hg = g.permute(hg, &[1, 0, 2])?;
    let wt = g.transpose_last2(uw)?;
    let y = g.matmul(hg, wt)?;
    let y = g.permute(y, &[1, 0, 2])?;
    let mut od = hd[..hd.len() - 1].to_vec();
    od.push(groups * og);
    g.reshape(y, &od)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, Streams};

    fn randn(dims: &[usize], rng: &mut StreamRng) -> Tensor {
        Tensor::from_fn(dims, |_| normal(rng) as f32)
    }

    fn parallel(out: usize, inp: usize, r: usize, seed: u64) -> LinearWithAdapter {
        let mut rng = Streams::new(seed).stream("t");
        LinearWithAdapter {
            w0: randn(&[out, inp], &mut rng),
            b0: randn(&[out], &mut rng),
            adapter: Some(Adapter::Parallel {
                a: randn(&[out, r], &mut rng),
                b: randn(&[r, inp], &mut rng),
            }),
            fused: None,
        }
    }

    fn sequential(out: usize, inp: usize, r: usize, groups: usize, seed: u64) -> LinearWithAdapter {
        let mut rng = Streams::new(seed).stream("t");
        LinearWithAdapter {
            w0: randn(&[out, inp], &mut rng),
            b0: randn(&[out], &mut rng),
            adapter: Some(Adapter::Sequential {
                down_w: randn(&[r, inp], &mut rng),
                down_b: randn(&[r], &mut rng),
                up_w: randn(&[groups, inp / groups, r / groups], &mut rng),
                up_b: randn(&[inp], &mut rng),
            }),
            fused: None,
        }
    }

    /// Independent evaluation of the adapter-then-frozen-linear composition
    /// with explicit loops and a dense block-diagonal up-projection.
    fn sequential_reference(layer: &LinearWithAdapter, x: &[f32]) -> Vec<f64> {
        let Some(Adapter::Sequential {
            down_w,
            down_b,
            up_w,
            up_b,
        }) = &layer.adapter
        else {
            unreachable!()
        };
        let (out, inp) = (layer.out_dim(), layer.in_dim());
        let r = down_w.dims()[0];
        let (g, og, rg) = (up_w.dims()[0], up_w.dims()[1], up_w.dims()[2]);
        let h: Vec<f64> = (0..r)
            .map(|j| down_b.data()[j] as f64 + (0..inp).map(|i| down_w.data()[j * inp + i] as f64 * x[i] as f64).sum::<f64>())
            .collect();
        let mut xa: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for grp in 0..g {
            for i in 0..og {
                let row = grp * og + i;
                let s: f64 = (0..rg).map(|j| up_w.data()[row * rg + j] as f64 * h[grp * rg + j]).sum();
                xa[row] += s + up_b.data()[row] as f64;
            }
        }
        (0..out)
            .map(|o| layer.b0.data()[o] as f64 + (0..inp).map(|i| layer.w0.data()[o * inp + i] as f64 * xa[i]).sum::<f64>())
            .collect()
    }

    #[test]
    fn zero_delta_parallel_keeps_w0() {
        let mut layer = parallel(4, 4, 1, 1);
        if let Some(Adapter::Parallel { b, .. }) = &mut layer.adapter {
            *b = Tensor::zeros(&[1, 4]);
        }
        let fused = fuse_parallel_lowrank(&layer).unwrap();
        let (w, bias) = fused.fused.as_ref().unwrap();
        assert!(w.bit_eq(&layer.w0));
        assert!(bias.bit_eq(&layer.b0));
    }

    #[test]
    fn parallel_fusion_matches_two_path_evaluation() {
        let layer = parallel(4, 4, 1, 2);
        let fused = fuse_parallel_lowrank(&layer).unwrap();
        assert!(fused.fused.as_ref().unwrap().1.bit_eq(&layer.b0));
        let mut rng = Streams::new(9).stream("x");
        let x = randn(&[16, 4], &mut rng);
        let a = layer.forward(&x).unwrap();
        let b = fused.forward(&x).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn zero_sequential_adapter_keeps_weights() {
        let layer = LinearWithAdapter {
            adapter: Some(Adapter::Sequential {
                down_w: Tensor::zeros(&[2, 8]),
                down_b: Tensor::zeros(&[2]),
                up_w: Tensor::zeros(&[1, 8, 2]),
                up_b: Tensor::zeros(&[8]),
            }),
            ..sequential(8, 8, 2, 1, 3)
        };
        let fused = fuse_sequential_rep(&layer).unwrap();
        let (w, b) = fused.fused.as_ref().unwrap();
        assert!(w.bit_eq(&layer.w0));
        assert!(b.bit_eq(&layer.b0));
    }

    #[test]
    fn sequential_fusion_matches_reference_for_groups() {
        for (groups, seed) in [(1, 4), (2, 5)] {
            let layer = sequential(8, 8, 2, groups, seed);
            let fused = fuse_sequential_rep(&layer).unwrap();
            let mut rng = Streams::new(seed + 100).stream("x");
            let x = randn(&[32, 8], &mut rng);
            let y_unfused = layer.forward(&x).unwrap();
            let y_fused = fused.forward(&x).unwrap();
            let mut worst = 0.0f64;
            for s in 0..32 {
                let reference = sequential_reference(&layer, x.row(s));
                for o in 0..8 {
                    worst = worst.max((reference[o] - y_fused.row(s)[o] as f64).abs());
                    worst = worst.max((reference[o] - y_unfused.row(s)[o] as f64).abs());
                }
            }
            assert!(worst <= 1e-5, "groups={groups}: {worst}");
        }
    }

    #[test]
    fn rectangular_sequential_layer() {
        let layer = sequential(12, 8, 4, 2, 6);
        let fused = fuse_sequential_rep(&layer).unwrap();
        let x = Tensor::from_fn(&[3, 8], |i| (i as f32 * 0.37).sin());
        assert!(layer.forward(&x).unwrap().max_abs_diff(&fused.forward(&x).unwrap()) <= 1e-5);
    }

    #[test]
    fn double_fusion_is_contract_error() {
        let fused = fuse_parallel_lowrank(&parallel(4, 4, 2, 7)).unwrap();
        assert!(matches!(fuse_parallel_lowrank(&fused), Err(Error::Contract(_))));
        let fused = fuse_sequential_rep(&sequential(4, 4, 2, 1, 7)).unwrap();
        assert!(matches!(fuse_sequential_rep(&fused), Err(Error::Contract(_))));
    }

    #[test]
    fn group_mismatch_is_dimension_error() {
        let mut layer = sequential(6, 6, 2, 1, 8);
        if let Some(Adapter::Sequential { up_w, .. }) = &mut layer.adapter {
            *up_w = Tensor::zeros(&[4, 1, 1]);
        }
        assert!(matches!(fuse_sequential_rep(&layer), Err(Error::Dimension { .. })));
    }

    #[test]
    fn wrong_kind_rejected() {
        assert!(fuse_sequential_rep(&parallel(4, 4, 2, 9)).is_err());
        assert!(fuse_parallel_lowrank(&sequential(4, 4, 2, 1, 9)).is_err());
    }
}
