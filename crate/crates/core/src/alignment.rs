//! Alignment measures across per-view embeddings and the combined loss
//! L = L_r + alpha * (-A). The measure A is oriented so that larger means
//! better aligned; DIS and SIM are therefore negated loss sums, DCCA is the
//! summed canonical correlation.

use crate::autodiff::{Graph, NodeId, SimKind};
use crate::error::{Error, Result};
use crate::tensor::{sym_eig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignKind {
    Dis,
    Sim,
    Dcca,
}

#[derive(Debug, Clone)]
pub struct AlignSpec {
    pub kind: AlignKind,
    /// weight of the alignment loss in the combined objective
    pub alpha: f64,
    /// DIS norm order
    pub p: u32,
    /// SIM margin
    pub margin: f64,
    pub sim: SimKind,
    /// DCCA covariance regularization
    pub reg: f64,
}

impl AlignSpec {
    pub fn dis() -> Self {
        Self::of_kind(AlignKind::Dis)
    }

    pub fn sim() -> Self {
        Self::of_kind(AlignKind::Sim)
    }

    pub fn dcca() -> Self {
        Self::of_kind(AlignKind::Dcca)
    }

    fn of_kind(kind: AlignKind) -> Self {
        Self {
            kind,
            alpha: 0.1,
            p: 2,
            margin: 1.0,
            sim: SimKind::Dot,
            reg: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.p != 1 && self.p != 2 {
            return Err(Error::Config(format!(
                "DIS norm order must be 1 or 2, got {}",
                self.p
            )));
        }
        if self.margin < 0.0 {
            return Err(Error::Config(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if self.reg <= 0.0 {
            return Err(Error::Config(format!(
                "DCCA regularizer must be > 0, got {}",
                self.reg
            )));
        }
        Ok(())
    }
}

/// Scalar alignment node plus any conditioning warning detected while
/// building it (only possible when the embedding values are already bound).
#[derive(Debug)]
pub struct MeasureResult {
    pub node: NodeId,
    pub warning: Option<String>,
}

/// Smallest eigenvalue of the regularized autocovariance of bound values,
/// used to flag near-singular DCCA inputs.
fn covariance_floor(h: &Tensor, reg: f64) -> Result<f64> {
    let (n, d) = h.dims2()?;
    let mu = h.col_means()?;
    let mut centered = h.data().to_vec();
    for i in 0..n {
        for j in 0..d {
            centered[i * d + j] -= mu.data()[j];
        }
    }
    let hb = Tensor::new(vec![n, d], centered)?;
    let mut cov = hb.transpose()?.matmul(&hb)?.scale(1.0 / (n as f64 - 1.0));
    for i in 0..d {
        let v = cov.get2(i, i) + reg;
        cov.set2(i, i, v);
    }
    let (vals, _) = sym_eig(&cov)?;
    Ok(vals.data()[d - 1])
}

/// Build the scalar alignment measure A over V embedding nodes (each [n, d]).
pub fn alignment_measure(
    g: &mut Graph,
    spec: &AlignSpec,
    views: &[NodeId],
) -> Result<MeasureResult> {
    spec.validate()?;
    if views.len() < 2 {
        return Err(Error::Arity(format!(
            "alignment needs at least 2 views, got {}",
            views.len()
        )));
    }
    let n = g.shape_of(views[0])[0];
    for &v in views {
        if g.shape_of(v).len() != 2 || g.shape_of(v)[0] != n {
            return Err(Error::Shape(format!(
                "alignment views must share batch size {n}, got {:?}",
                g.shape_of(v)
            )));
        }
    }
    if matches!(spec.kind, AlignKind::Sim | AlignKind::Dcca) && n < 2 {
        return Err(Error::BatchTooSmall(format!(
            "{:?} alignment needs at least 2 samples, got {n}",
            spec.kind
        )));
    }

    let mut warning = None;
    let node = match spec.kind {
        AlignKind::Dis => {
            let mut terms = Vec::new();
            for i in 0..views.len() - 1 {
                for j in i + 1..views.len() {
                    if g.shape_of(views[i]) != g.shape_of(views[j]) {
                        return Err(Error::Shape(
                            "DIS alignment needs equal embedding dims".into(),
                        ));
                    }
                    let diff = g.sub(views[i], views[j])?;
                    let term = match spec.p {
                        1 => {
                            let a = g.abs(diff);
                            g.sum_all(a)
                        }
                        _ => g.sum_squares(diff),
                    };
                    terms.push(term);
                }
            }
            let total = g.add_n(&terms)?;
            g.scale(total, -1.0)
        }
        AlignKind::Sim => {
            let mut terms = Vec::new();
            for i in 0..views.len() - 1 {
                for j in i + 1..views.len() {
                    let (hi, hj) = match spec.sim {
                        SimKind::Dot => (views[i], views[j]),
                        SimKind::Cosine => (g.row_normalize(views[i])?, g.row_normalize(views[j])?),
                    };
                    let hjt = g.transpose(hj)?;
                    let s = g.matmul(hi, hjt)?;
                    terms.push(g.hinge_from_sim(s, spec.margin)?);
                }
            }
            let total = g.add_n(&terms)?;
            g.scale(total, -1.0)
        }
        AlignKind::Dcca => {
            let mut notes = Vec::new();
            for (v, &h) in views.iter().enumerate() {
                if let Ok(val) = g.forward(h) {
                    let val = val.clone();
                    if covariance_floor(&val, spec.reg)? < 1e-10 {
                        notes.push(format!("view {v} covariance near-singular despite reg"));
                    }
                }
            }
            if !notes.is_empty() {
                warning = Some(notes.join("; "));
            }
            let mut terms = Vec::new();
            for i in 0..views.len() - 1 {
                for j in i + 1..views.len() {
                    terms.push(g.dcca_corr(views[i], views[j], spec.reg)?);
                }
            }
            g.add_n(&terms)?
        }
    };
    Ok(MeasureResult { node, warning })
}

/// L = L_r + alpha * (-A). Both inputs must be scalar nodes.
pub fn combined_loss(
    g: &mut Graph,
    spec: &AlignSpec,
    reconstruction: NodeId,
    measure: NodeId,
) -> Result<NodeId> {
    for id in [reconstruction, measure] {
        if g.shape_of(id).iter().product::<usize>() != 1 {
            return Err(Error::Shape(format!(
                "combined_loss inputs must be scalar, got {:?}",
                g.shape_of(id)
            )));
        }
    }
    let neg = g.scale(measure, -spec.alpha);
    g.add(reconstruction, neg)
}
