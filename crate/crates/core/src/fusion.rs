//! Fusion functions mapping V per-view embeddings to one joint embedding:
//! elementwise mean (SUM), elementwise max (MAX), a learnable network on the
//! concatenation (NN), and low-rank tensor fusion (TF).

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{forward_mlp, glorot, install_mlp, Activation, Mlp, MlpSpec, MlpVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Sum,
    Max,
    Nn,
    Tf,
}

#[derive(Debug, Clone)]
pub struct FusionSpec {
    pub kind: FusionKind,
    /// NN only: hidden widths between the concatenation and the output.
    pub nn_hidden: Vec<usize>,
    pub nn_activation: Activation,
    /// TF only: rank of the low-rank weight factorization.
    pub rank: usize,
}

pub const DEFAULT_TF_RANK: usize = 16;

impl FusionSpec {
    pub fn sum() -> Self {
        Self::of_kind(FusionKind::Sum)
    }

    pub fn max() -> Self {
        Self::of_kind(FusionKind::Max)
    }

    pub fn nn(hidden: Vec<usize>) -> Self {
        Self {
            nn_hidden: hidden,
            ..Self::of_kind(FusionKind::Nn)
        }
    }

    pub fn tf(rank: usize) -> Self {
        Self {
            rank,
            ..Self::of_kind(FusionKind::Tf)
        }
    }

    fn of_kind(kind: FusionKind) -> Self {
        Self {
            kind,
            nn_hidden: Vec::new(),
            nn_activation: Activation::Tanh,
            rank: DEFAULT_TF_RANK,
        }
    }

    pub fn validate(&self, in_dims: &[usize]) -> Result<()> {
        if in_dims.len() < 2 {
            return Err(Error::Arity(format!(
                "fusion needs at least 2 views, got {}",
                in_dims.len()
            )));
        }
        match self.kind {
            FusionKind::Sum | FusionKind::Max => {
                if in_dims.iter().any(|&d| d != in_dims[0]) {
                    return Err(Error::Shape(format!(
                        "SUM/MAX fusion needs equal embedding dims, got {in_dims:?}"
                    )));
                }
            }
            FusionKind::Tf => {
                if self.rank == 0 {
                    return Err(Error::Config("TF rank must be at least 1".into()));
                }
            }
            FusionKind::Nn => {}
        }
        Ok(())
    }
}

/// Learnable state of a fusion function. SUM and MAX have none.
#[derive(Debug, Clone, Default)]
pub struct FusionParams {
    pub nn: Option<Mlp>,
    /// one factor tensor per view, shape [R, d_out, d_v]
    pub tf_factors: Vec<Tensor>,
    pub tf_bias: Option<Tensor>,
}

pub fn init_fusion(
    spec: &FusionSpec,
    in_dims: &[usize],
    d_out: usize,
    rng: &mut Rng,
) -> Result<FusionParams> {
    spec.validate(in_dims)?;
    let mut params = FusionParams::default();
    match spec.kind {
        FusionKind::Sum | FusionKind::Max => {
            if in_dims[0] != d_out {
                return Err(Error::Shape(format!(
                    "SUM/MAX fusion passes dims through: in {} vs out {d_out}",
                    in_dims[0]
                )));
            }
        }
        FusionKind::Nn => {
            let mut dims = vec![in_dims.iter().sum::<usize>()];
            dims.extend(&spec.nn_hidden);
            dims.push(d_out);
            let mut mspec = MlpSpec::new(dims);
            mspec.hidden = spec.nn_activation;
            params.nn = Some(Mlp::init(mspec, rng)?);
        }
        FusionKind::Tf => {
            for &d in in_dims {
                let flat = glorot(rng, spec.rank * d_out, d);
                params
                    .tf_factors
                    .push(flat.reshape(&[spec.rank, d_out, d])?);
            }
            params.tf_bias = Some(Tensor::zeros(&[d_out]));
        }
    }
    Ok(params)
}

/// Graph-side handles for the learnable fusion parameters.
#[derive(Debug, Clone, Default)]
pub struct FusionVars {
    pub nn: Option<MlpVars>,
    /// factors installed flat as [R*d_out, d_v] for the matmul path
    pub tf_factors: Vec<NodeId>,
    pub tf_bias: Option<NodeId>,
}

pub fn install_fusion(g: &mut Graph, prefix: &str, params: &FusionParams) -> Result<FusionVars> {
    let mut vars = FusionVars::default();
    if let Some(mlp) = &params.nn {
        vars.nn = Some(install_mlp(g, &format!("{prefix}.nn"), mlp));
    }
    for (v, f) in params.tf_factors.iter().enumerate() {
        let &[r, d_out, d] = f.shape() else {
            return Err(Error::Shape(format!(
                "TF factor must be rank 3, got {:?}",
                f.shape()
            )));
        };
        let flat = f.reshape(&[r * d_out, d])?;
        vars.tf_factors
            .push(g.constant(&format!("{prefix}.tf{v}"), flat));
    }
    if let Some(b) = &params.tf_bias {
        vars.tf_bias = Some(g.constant(&format!("{prefix}.tfb"), b.clone()));
    }
    Ok(vars)
}

/// Joint embedding node from V per-view embedding nodes (each [n, d_v]).
pub fn fuse(
    g: &mut Graph,
    spec: &FusionSpec,
    vars: &FusionVars,
    embeddings: &[NodeId],
) -> Result<NodeId> {
    if embeddings.len() < 2 {
        return Err(Error::Arity(format!(
            "fusion needs at least 2 views, got {}",
            embeddings.len()
        )));
    }
    match spec.kind {
        FusionKind::Sum => {
            let s = g.add_n(embeddings)?;
            Ok(g.scale(s, 1.0 / embeddings.len() as f64))
        }
        FusionKind::Max => g.max_views(embeddings),
        FusionKind::Nn => {
            let cat = g.concat_cols(embeddings)?;
            let mvars = vars
                .nn
                .as_ref()
                .ok_or_else(|| Error::Config("NN fusion parameters missing".into()))?;
            forward_mlp(g, mvars, cat)
        }
        FusionKind::Tf => {
            if vars.tf_factors.len() != embeddings.len() || vars.tf_bias.is_none() {
                return Err(Error::Config("TF fusion parameters missing".into()));
            }
            // projected[v][n, r*d_out + k] = <w_{r,k}^{(v)}, h_n^{(v)}>
            let mut joint: Option<NodeId> = None;
            for (v, &h) in embeddings.iter().enumerate() {
                let ft = g.transpose(vars.tf_factors[v])?;
                let p = g.matmul(h, ft)?;
                joint = Some(match joint {
                    None => p,
                    Some(q) => g.mul(q, p)?,
                });
            }
            let prod = joint.unwrap();
            let summed = g.block_sum(prod, spec.rank)?;
            g.add_row_broadcast(summed, vars.tf_bias.unwrap())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_max_rel_err;

    fn embed(g: &mut Graph, name: &str, rows: &[Vec<f64>]) -> NodeId {
        g.constant(name, Tensor::from_rows(rows).unwrap())
    }

    fn fuse_values(
        spec: &FusionSpec,
        params: &FusionParams,
        views: &[Vec<Vec<f64>>],
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = install_fusion(&mut g, "f", params)?;
        let nodes: Vec<NodeId> = views
            .iter()
            .enumerate()
            .map(|(v, rows)| embed(&mut g, &format!("h{v}"), rows))
            .collect();
        let out = fuse(&mut g, spec, &vars, &nodes)?;
        Ok(g.forward(out)?.clone())
    }

    /// Full-tensor reference: W_k = sum_r outer(w_{r,k}^{(1..V)}) contracted
    /// against Z = outer(h^{(1..V)}), plus bias. Enumerates every index tuple.
    fn explicit_tf(factors: &[Tensor], bias: &Tensor, hs: &[&[f64]]) -> Vec<f64> {
        let views = factors.len();
        let rank = factors[0].shape()[0];
        let d_out = factors[0].shape()[1];
        let dims: Vec<usize> = factors.iter().map(|f| f.shape()[2]).collect();
        let mut out = vec![0.0; d_out];
        for (k, o) in out.iter_mut().enumerate() {
            let mut idx = vec![0usize; views];
            'tuples: loop {
                let mut w = 0.0;
                for r in 0..rank {
                    let mut prod = 1.0;
                    for v in 0..views {
                        prod *= factors[v].data()[r * d_out * dims[v] + k * dims[v] + idx[v]];
                    }
                    w += prod;
                }
                let mut z = 1.0;
                for v in 0..views {
                    z *= hs[v][idx[v]];
                }
                *o += w * z;
                for v in 0..views {
                    idx[v] += 1;
                    if idx[v] < dims[v] {
                        continue 'tuples;
                    }
                    idx[v] = 0;
                }
                break;
            }
            *o += bias.data()[k];
        }
        out
    }

    #[test]
    fn sum_is_the_mean() {
        let spec = FusionSpec::sum();
        let out = fuse_values(
            &spec,
            &FusionParams::default(),
            &[vec![vec![1.0, 2.0]], vec![vec![3.0, 4.0]]],
        )
        .unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }

    #[test]
    fn max_is_elementwise() {
        let spec = FusionSpec::max();
        let out = fuse_values(
            &spec,
            &FusionParams::default(),
            &[vec![vec![1.0, 5.0]], vec![vec![3.0, 2.0]]],
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0, 5.0]);
    }

    #[test]
    fn tf_scalar_outer_product() {
        let spec = FusionSpec::tf(1);
        let params = FusionParams {
            nn: None,
            tf_factors: vec![
                Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
                Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            ],
            tf_bias: Some(Tensor::zeros(&[1])),
        };
        let out = fuse_values(&spec, &params, &[vec![vec![2.0]], vec![vec![3.0]]]).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn tf_matches_explicit_tensor_across_grid() {
        let mut rng = Rng::new(31);
        for &views in &[2usize, 3] {
            for &rank in &[1usize, 2, 4] {
                for &d in &[1usize, 3, 4] {
                    let in_dims = vec![d; views];
                    let d_out = 2.min(d + 1);
                    let spec = FusionSpec::tf(rank);
                    let mut params = init_fusion(&spec, &in_dims, d_out, &mut rng).unwrap();
                    // Non-zero bias exercises the +b(k) term.
                    params.tf_bias = Some(
                        Tensor::new(vec![d_out], (0..d_out).map(|k| 0.1 * k as f64).collect())
                            .unwrap(),
                    );
                    let batch: Vec<Vec<Vec<f64>>> = (0..views)
                        .map(|_| {
                            (0..2)
                                .map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect())
                                .collect()
                        })
                        .collect();
                    let out = fuse_values(&spec, &params, &batch).unwrap();
                    for row in 0..2 {
                        let hs: Vec<&[f64]> =
                            batch.iter().map(|view| view[row].as_slice()).collect();
                        let want =
                            explicit_tf(&params.tf_factors, params.tf_bias.as_ref().unwrap(), &hs);
                        for k in 0..d_out {
                            let diff = (out.get2(row, k) - want[k]).abs();
                            assert!(diff < 1e-10, "V={views} R={rank} d={d} k={k}: diff {diff}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sum_max_permutation_invariant() {
        let a = vec![vec![0.3, -1.0], vec![2.0, 0.1]];
        let b = vec![vec![-0.5, 0.7], vec![1.0, 4.0]];
        for spec in [FusionSpec::sum(), FusionSpec::max()] {
            let fwd =
                fuse_values(&spec, &FusionParams::default(), &[a.clone(), b.clone()]).unwrap();
            let rev =
                fuse_values(&spec, &FusionParams::default(), &[b.clone(), a.clone()]).unwrap();
            assert_eq!(fwd, rev);
        }
    }

    #[test]
    fn nn_tf_order_sensitive() {
        let mut rng = Rng::new(32);
        let a = vec![vec![0.3, -1.0]];
        let b = vec![vec![-0.5, 0.7]];
        for spec in [FusionSpec::nn(vec![]), FusionSpec::tf(2)] {
            let params = init_fusion(&spec, &[2, 2], 2, &mut rng).unwrap();
            let fwd = fuse_values(&spec, &params, &[a.clone(), b.clone()]).unwrap();
            let rev = fuse_values(&spec, &params, &[b.clone(), a.clone()]).unwrap();
            let diff = fwd.sub(&rev).unwrap().max_abs();
            assert!(diff > 1e-6, "{:?} unexpectedly symmetric", spec.kind);
        }
    }

    #[test]
    fn sum_is_homogeneous() {
        let spec = FusionSpec::sum();
        let a = vec![vec![0.3, -1.0], vec![2.0, 0.1]];
        let b = vec![vec![-0.5, 0.7], vec![1.0, 4.0]];
        let c = 3.7;
        let scaled: Vec<Vec<Vec<f64>>> = [&a, &b]
            .iter()
            .map(|view| {
                view.iter()
                    .map(|row| row.iter().map(|x| c * x).collect())
                    .collect()
            })
            .collect();
        let base = fuse_values(&spec, &FusionParams::default(), &[a, b]).unwrap();
        let from_scaled = fuse_values(&spec, &FusionParams::default(), &scaled).unwrap();
        let diff = from_scaled.sub(&base.scale(c)).unwrap().max_abs();
        assert!(diff < 1e-12);
    }

    #[test]
    fn rejects_single_view_and_dim_mismatch() {
        let mut g = Graph::new();
        let h = embed(&mut g, "h", &[vec![1.0, 2.0]]);
        let vars = FusionVars::default();
        assert!(matches!(
            fuse(&mut g, &FusionSpec::sum(), &vars, &[h]),
            Err(Error::Arity(_))
        ));
        assert!(matches!(
            FusionSpec::sum().validate(&[2, 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            FusionSpec::tf(0).validate(&[2, 2]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fd_gradients_through_tf_and_nn() {
        let mut rng = Rng::new(33);
        for spec in [FusionSpec::tf(2), FusionSpec::nn(vec![3])] {
            let params = init_fusion(&spec, &[3, 2], 2, &mut rng).unwrap();
            let mut g = Graph::new();
            let vars = install_fusion(&mut g, "f", &params).unwrap();
            let h0 = embed(&mut g, "h0", &[vec![0.4, -0.2, 0.9], vec![-0.7, 0.3, 0.1]]);
            let h1 = embed(&mut g, "h1", &[vec![0.5, -0.1], vec![0.2, 0.8]]);
            let out = fuse(&mut g, &spec, &vars, &[h0, h1]).unwrap();
            let loss = g.sum_squares(out);
            let mut wrt = vec![h0, h1];
            wrt.extend(&vars.tf_factors);
            if let Some(b) = vars.tf_bias {
                wrt.push(b);
            }
            if let Some(nn) = &vars.nn {
                wrt.extend(&nn.weights);
                wrt.extend(&nn.biases);
            }
            assert!(fd_max_rel_err(&mut g, loss, &wrt, 1e-5).unwrap() < 1e-4);
        }
    }
}
