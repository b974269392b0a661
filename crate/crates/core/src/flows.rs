//! Invertible posterior transformations and their log-det-Jacobian terms.
//!
//! Strictly-lower entries of an `M × M` unit-lower-triangular matrix are packed
//! row-major: row `i` (0-based) contributes its `i` sub-diagonal entries, so
//! entry `(i, j)` with `j < i` lives at offset `i·(i−1)/2 + j`. Checkpoints
//! depend on this order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor_ad::{CustomOp, Tape, Tensor, Var};

/// Squared-norm guard for Householder vectors.
pub const HOUSEHOLDER_EPS: f64 = 1e-12;
/// Tolerance on the gating weights summing to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Number of strictly-lower entries of an `m × m` matrix.
pub fn strict_lower_len(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

#[inline]
fn row_offset(i: usize) -> usize {
    i * i.saturating_sub(1) / 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowKind {
    /// Plain diagonal-Gaussian posterior.
    None,
    Householder { steps: usize },
    Planar { steps: usize },
    LinIaf,
    CcLinIaf { components: usize },
}

impl FlowKind {
    pub fn name(&self) -> &'static str {
        match self {
            FlowKind::None => "none",
            FlowKind::Householder { .. } => "hf",
            FlowKind::Planar { .. } => "planar",
            FlowKind::LinIaf => "liniaf",
            FlowKind::CcLinIaf { .. } => "ccliniaf",
        }
    }

    /// Builds a kind from its name plus the step count `T` and component count `K`.
    pub fn from_parts(name: &str, steps: usize, components: usize) -> Result<Self> {
        let kind = match name {
            "none" => FlowKind::None,
            "hf" | "householder" => FlowKind::Householder { steps },
            "planar" => FlowKind::Planar { steps },
            "liniaf" => FlowKind::LinIaf,
            "ccliniaf" => FlowKind::CcLinIaf { components },
            other => return Err(Error::Config(format!("unknown flow kind '{other}'"))),
        };
        match kind {
            FlowKind::Householder { steps: 0 } | FlowKind::Planar { steps: 0 } => {
                Err(Error::Config(format!("flow '{name}' needs at least one step")))
            }
            FlowKind::CcLinIaf { components: 0 } => Err(Error::Config("ccliniaf needs K >= 1".into())),
            k => Ok(k),
        }
    }

    pub fn is_volume_preserving(&self) -> bool {
        !matches!(self, FlowKind::Planar { .. })
    }

    /// Width of the encoder head that emits flow parameters.
    pub fn param_width(&self, latent: usize) -> usize {
        match *self {
            FlowKind::None => 0,
            FlowKind::Householder { steps } => steps * latent,
            FlowKind::Planar { steps } => steps * (2 * latent + 1),
            FlowKind::LinIaf => strict_lower_len(latent),
            FlowKind::CcLinIaf { components } => components * strict_lower_len(latent),
        }
    }

    /// Width of the gating head (ccLinIAF only).
    pub fn gate_width(&self) -> usize {
        match *self {
            FlowKind::CcLinIaf { components } => components,
            _ => 0,
        }
    }

    pub fn validate_latent(&self, latent: usize) -> Result<()> {
        if latent == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if matches!(self, FlowKind::LinIaf | FlowKind::CcLinIaf { .. }) && latent < 2 {
            return Err(Error::Config(format!(
                "{} needs a latent dimension of at least 2",
                self.name()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowKind::Householder { steps } | FlowKind::Planar { steps } => write!(f, "{}(T={steps})", self.name()),
            FlowKind::CcLinIaf { components } => write!(f, "ccliniaf(K={components})"),
            _ => f.write_str(self.name()),
        }
    }
}

impl FromStr for FlowKind {
    type Err = Error;

    /// Accepts `none`, `liniaf`, `hf:T`, `planar:T` and `ccliniaf:K`; a bare
    /// `hf`/`planar` means one step and a bare `ccliniaf` means K=5.
    fn from_str(s: &str) -> Result<Self> {
        let (name, count) = match s.split_once(':') {
            Some((name, n)) => {
                let n = n
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad count in flow spec '{s}'")))?;
                (name, Some(n))
            }
            None => (s, None),
        };
        Self::from_parts(name, count.unwrap_or(1), count.unwrap_or(5))
    }
}

// ── Plain matrices ────────────────────────────────────────────────────

/// Lower-triangular `M × M` matrix with exact ones on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerUnitTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerUnitTriangular {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        LowerUnitTriangular { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major dense storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Packed strictly-lower entries.
    pub fn strict_lower(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(strict_lower_len(self.dim));
        for i in 1..self.dim {
            out.extend_from_slice(&self.data[i * self.dim..i * self.dim + i]);
        }
        out
    }

    /// Product of the diagonal, which is exactly one.
    pub fn determinant(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).product()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| z[i] + (0..i).map(|j| self.get(i, j) * z[j]).sum::<f64>())
            .collect()
    }

    /// Inverts [`apply`](Self::apply) by forward substitution.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim];
        for i in 0..self.dim {
            z[i] = rhs[i] - (0..i).map(|j| self.get(i, j) * z[j]).sum::<f64>();
        }
        z
    }
}

/// Fills the strict lower triangle row-major from `entries`; ones on the
/// diagonal, zeros above.
pub fn assemble_lower_unit(entries: &[f64], dim: usize) -> Result<LowerUnitTriangular> {
    if entries.len() != strict_lower_len(dim) {
        return Err(Error::invalid(
            "assemble_lower_unit",
            format!(
                "expected {} entries for M={dim}, got {}",
                strict_lower_len(dim),
                entries.len()
            ),
        ));
    }
    let mut l = LowerUnitTriangular::identity(dim);
    for i in 1..dim {
        let off = row_offset(i);
        l.data[i * dim..i * dim + i].copy_from_slice(&entries[off..off + i]);
    }
    Ok(l)
}

/// `Σ_k y_k L_k`. The diagonal is written as exactly one rather than summed,
/// since the weights sum to one only up to rounding.
pub fn convex_combine(ls: &[LowerUnitTriangular], weights: &[f64]) -> Result<LowerUnitTriangular> {
    let Some(first) = ls.first() else {
        return Err(Error::invalid("convex_combine", "no matrices"));
    };
    if ls.len() != weights.len() {
        return Err(Error::invalid(
            "convex_combine",
            format!("{} matrices but {} weights", ls.len(), weights.len()),
        ));
    }
    if ls.iter().any(|l| l.dim != first.dim) {
        return Err(Error::invalid("convex_combine", "matrices differ in size"));
    }
    check_weights(weights)?;
    let dim = first.dim;
    let mut out = LowerUnitTriangular::identity(dim);
    for i in 1..dim {
        for j in 0..i {
            out.data[i * dim + j] = ls.iter().zip(weights).map(|(l, &y)| y * l.get(i, j)).sum();
        }
    }
    Ok(out)
}

fn check_weights(weights: &[f64]) -> Result<()> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&y| !(y >= 0.0)) || (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Contract(format!(
            "convex weights must be non-negative and sum to 1, got sum {total}"
        )));
    }
    Ok(())
}

// ── Tape-level steps ──────────────────────────────────────────────────

/// Output of a flow: transformed sample and per-example `ln |det ∂f/∂z|`.
#[derive(Clone, Copy, Debug)]
pub struct FlowOutput {
    pub z: Var,
    pub log_det: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PlanarParams {
    pub u: Var,
    pub w: Var,
    pub b: Var,
}

/// Encoder-produced flow parameters, one variant per [`FlowKind`].
#[derive(Clone, Debug)]
pub enum FlowParams {
    None,
    Householder(Vec<Var>),
    Planar(Vec<PlanarParams>),
    LinIaf { entries: Var },
    CcLinIaf { entries: Var, logits: Var },
}

impl FlowParams {
    /// Splits the raw flow head `[B, param_width]` (and the gating head for
    /// ccLinIAF) into per-step parameters.
    pub fn from_heads(tape: &mut Tape, kind: FlowKind, latent: usize, head: Option<Var>, gate: Option<Var>) -> Result<Self> {
        let need = |v: Option<Var>, what: &str| {
            v.ok_or_else(|| Error::invalid("flow_params", format!("{} requires a {what} head", kind.name())))
        };
        if let Some(h) = head {
            let width = tape.value(h).dims2()?.1;
            if width != kind.param_width(latent) {
                return Err(Error::invalid(
                    "flow_params",
                    format!("{kind} expects head width {}, got {width}", kind.param_width(latent)),
                ));
            }
        }
        Ok(match kind {
            FlowKind::None => FlowParams::None,
            FlowKind::Householder { steps } => {
                let h = need(head, "flow")?;
                let vs = (0..steps)
                    .map(|t| tape.slice_cols(h, t * latent, (t + 1) * latent))
                    .collect::<Result<_>>()?;
                FlowParams::Householder(vs)
            }
            FlowKind::Planar { steps } => {
                let h = need(head, "flow")?;
                let stride = 2 * latent + 1;
                let mut out = Vec::with_capacity(steps);
                for t in 0..steps {
                    let base = t * stride;
                    out.push(PlanarParams {
                        u: tape.slice_cols(h, base, base + latent)?,
                        w: tape.slice_cols(h, base + latent, base + 2 * latent)?,
                        b: tape.slice_cols(h, base + 2 * latent, base + stride)?,
                    });
                }
                FlowParams::Planar(out)
            }
            FlowKind::LinIaf => FlowParams::LinIaf {
                entries: need(head, "flow")?,
            },
            FlowKind::CcLinIaf { .. } => FlowParams::CcLinIaf {
                entries: need(head, "flow")?,
                logits: need(gate, "gating")?,
            },
        })
    }
}

fn batch_latent(tape: &Tape, z0: Var, op: &'static str) -> Result<(usize, usize)> {
    tape.value(z0)
        .dims2()
        .map_err(|_| Error::invalid(op, format!("z must be [batch, M], got {:?}", tape.shape(z0))))
}

fn zero_log_det(tape: &mut Tape, batch: usize) -> Var {
    tape.constant(Tensor::zeros(&[batch]))
}

/// `z ↦ L z` per example with `L` unit-lower-triangular built from packed
/// entries `[B, M(M−1)/2]`.
struct LowerUnitMatvec {
    dim: usize,
}

impl LowerUnitMatvec {
    fn forward(&self, entries: &Tensor, z: &Tensor) -> Result<Tensor> {
        let m = self.dim;
        let p = strict_lower_len(m);
        let (batch, _) = z.dims2()?;
        let mut out = z.data().to_vec();
        for b in 0..batch {
            let e = &entries.data()[b * p..(b + 1) * p];
            let zb = &z.data()[b * m..(b + 1) * m];
            let ob = &mut out[b * m..(b + 1) * m];
            for i in 1..m {
                let row = &e[row_offset(i)..row_offset(i) + i];
                ob[i] += row.iter().zip(&zb[..i]).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        Tensor::new(z.shape(), out)
    }
}

impl CustomOp for LowerUnitMatvec {
    fn name(&self) -> &'static str {
        "lower_unit_matvec"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (entries, z) = (inputs[0], inputs[1]);
        let m = self.dim;
        let p = strict_lower_len(m);
        let batch = z.shape()[0];
        let mut de = vec![0.0; entries.len()];
        let mut dz = g.to_vec();
        for b in 0..batch {
            let e = &entries.data()[b * p..(b + 1) * p];
            let zb = &z.data()[b * m..(b + 1) * m];
            let gb = &g[b * m..(b + 1) * m];
            let deb = &mut de[b * p..(b + 1) * p];
            let dzb = &mut dz[b * m..(b + 1) * m];
            for i in 1..m {
                let off = row_offset(i);
                for j in 0..i {
                    deb[off + j] = gb[i] * zb[j];
                    dzb[j] += e[off + j] * gb[i];
                }
            }
        }
        Ok(vec![de, dz])
    }
}

fn lower_unit_matvec(tape: &mut Tape, entries: Var, z0: Var) -> Result<Var> {
    let (batch, m) = batch_latent(tape, z0, "lower_unit_matvec")?;
    let expected = [batch, strict_lower_len(m)];
    if tape.shape(entries) != expected {
        return Err(Error::shape("lower_unit_matvec", tape.shape(entries), &expected));
    }
    let op = LowerUnitMatvec { dim: m };
    let out = op.forward(tape.value(entries), tape.value(z0))?;
    Ok(tape.custom(&[entries, z0], out, Box::new(op)))
}

/// Linear IAF: `z1 = L(x) z0` with a single unit-lower-triangular matrix.
pub fn liniaf_step(tape: &mut Tape, z0: Var, entries: Var) -> Result<FlowOutput> {
    let (batch, _) = batch_latent(tape, z0, "liniaf_step")?;
    let z = lower_unit_matvec(tape, entries, z0)?;
    let log_det = zero_log_det(tape, batch);
    Ok(FlowOutput { z, log_det })
}

/// Convex-combination linear IAF: `z1 = (Σ_k y_k L_k) z0` with
/// `y = softmax(logits)`. `entries` is `[B, K·M(M−1)/2]`, one packed block
/// per component; `logits` is `[B, K]`.
pub fn ccliniaf_step(tape: &mut Tape, z0: Var, entries: Var, logits: Var) -> Result<FlowOutput> {
    let (batch, m) = batch_latent(tape, z0, "ccliniaf_step")?;
    let p = strict_lower_len(m);
    let (lb, k) = tape.value(logits).dims2()?;
    if lb != batch || k == 0 {
        return Err(Error::shape("ccliniaf_step", tape.shape(logits), &[batch, k]));
    }
    if tape.shape(entries) != [batch, k * p] {
        return Err(Error::shape("ccliniaf_step", tape.shape(entries), &[batch, k * p]));
    }
    let y = tape.softmax(logits)?;
    for row in tape.value(y).data().chunks(k) {
        check_weights(row)?;
    }
    let mut mixed: Option<Var> = None;
    for c in 0..k {
        let block = tape.slice_cols(entries, c * p, (c + 1) * p)?;
        let yc = tape.slice_cols(y, c, c + 1)?;
        let yc = tape.expand_cols(yc, p)?;
        let term = tape.mul(block, yc)?;
        mixed = Some(match mixed {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let mixed = mixed.expect("k >= 1");
    let z = lower_unit_matvec(tape, mixed, z0)?;
    let log_det = zero_log_det(tape, batch);
    Ok(FlowOutput { z, log_det })
}

/// Householder reflection `z1 = z0 − 2 v (vᵀz0) / (‖v‖² + ε)`.
pub fn householder_step(tape: &mut Tape, z0: Var, v: Var) -> Result<FlowOutput> {
    let (batch, m) = batch_latent(tape, z0, "householder_step")?;
    if tape.shape(v) != [batch, m] {
        return Err(Error::shape("householder_step", tape.shape(v), &[batch, m]));
    }
    let vz = tape.mul(v, z0)?;
    let vz = tape.sum(vz, Some(1))?;
    let vv = tape.square(v)?;
    let vv = tape.sum(vv, Some(1))?;
    let vv = tape.add_scalar(vv, HOUSEHOLDER_EPS)?;
    let coef = tape.div(vz, vv)?;
    let coef = tape.scale(coef, 2.0)?;
    let coef = tape.expand_cols(coef, m)?;
    let shift = tape.mul(v, coef)?;
    let z = tape.sub(z0, shift)?;
    let log_det = zero_log_det(tape, batch);
    Ok(FlowOutput { z, log_det })
}

/// Planar flow `z1 = z0 + û tanh(wᵀz0 + b)` with `û` reparameterized so that
/// `ûᵀw ≥ −1`, which keeps the map invertible.
pub fn planar_step(tape: &mut Tape, z0: Var, params: PlanarParams) -> Result<FlowOutput> {
    let (batch, m) = batch_latent(tape, z0, "planar_step")?;
    let PlanarParams { u, w, b } = params;
    for (name, v) in [("u", u), ("w", w)] {
        if tape.shape(v) != [batch, m] {
            return Err(Error::invalid(
                "planar_step",
                format!("{name} has shape {:?}, expected [{batch}, {m}]", tape.shape(v)),
            ));
        }
    }
    let b = match tape.shape(b) {
        [bb] | [bb, 1] if *bb == batch => tape.reshape(b, &[batch])?,
        s => return Err(Error::shape("planar_step", s, &[batch])),
    };

    let ww = tape.square(w)?;
    let ww = tape.sum(ww, Some(1))?;
    if let Some(bad) = tape.value(ww).data().iter().find(|&&n| n.sqrt() < 1e-12) {
        return Err(Error::domain("planar_step", format!("degenerate w with norm {}", bad.sqrt())));
    }
    let wu = tape.mul(w, u)?;
    let wu = tape.sum(wu, Some(1))?;
    // û = u + (softplus(wᵀu) − 1 − wᵀu) w / ‖w‖²
    let sp = tape.softplus(wu)?;
    let corr = tape.sub(sp, wu)?;
    let corr = tape.add_scalar(corr, -1.0)?;
    let corr = tape.div(corr, ww)?;
    let corr = tape.expand_cols(corr, m)?;
    let corr = tape.mul(corr, w)?;
    let u_hat = tape.add(u, corr)?;

    let wz = tape.mul(w, z0)?;
    let wz = tape.sum(wz, Some(1))?;
    let act = tape.add(wz, b)?;
    let h = tape.tanh(act)?;
    let hx = tape.expand_cols(h, m)?;
    let shift = tape.mul(u_hat, hx)?;
    let z = tape.add(z0, shift)?;

    // ln |1 + ûᵀw (1 − h²)|
    let uw = tape.mul(u_hat, w)?;
    let uw = tape.sum(uw, Some(1))?;
    let h2 = tape.square(h)?;
    let dh = tape.neg(h2)?;
    let dh = tape.add_scalar(dh, 1.0)?;
    let det = tape.mul(uw, dh)?;
    let det = tape.add_scalar(det, 1.0)?;
    let det = tape.abs(det)?;
    let log_det = tape.log(det)?;
    Ok(FlowOutput { z, log_det })
}

/// Runs every step of the flow and sums their log-determinants.
pub fn apply_flow(tape: &mut Tape, kind: FlowKind, z0: Var, params: &FlowParams) -> Result<FlowOutput> {
    let (batch, _) = batch_latent(tape, z0, "apply_flow")?;
    match (kind, params) {
        (FlowKind::None, FlowParams::None) => {
            let log_det = zero_log_det(tape, batch);
            Ok(FlowOutput { z: z0, log_det })
        }
        (FlowKind::Householder { steps }, FlowParams::Householder(vs)) if vs.len() == steps => {
            let mut z = z0;
            for &v in vs {
                z = householder_step(tape, z, v)?.z;
            }
            let log_det = zero_log_det(tape, batch);
            Ok(FlowOutput { z, log_det })
        }
        (FlowKind::Planar { steps }, FlowParams::Planar(ps)) if ps.len() == steps => {
            let mut z = z0;
            let mut total: Option<Var> = None;
            for &p in ps {
                let out = planar_step(tape, z, p)?;
                z = out.z;
                total = Some(match total {
                    None => out.log_det,
                    Some(acc) => tape.add(acc, out.log_det)?,
                });
            }
            Ok(FlowOutput {
                z,
                log_det: total.expect("steps >= 1"),
            })
        }
        (FlowKind::LinIaf, FlowParams::LinIaf { entries }) => liniaf_step(tape, z0, *entries),
        (FlowKind::CcLinIaf { components }, FlowParams::CcLinIaf { entries, logits })
            if tape.shape(*logits).last() == Some(&components) =>
        {
            ccliniaf_step(tape, z0, *entries, *logits)
        }
        _ => Err(Error::invalid(
            "apply_flow",
            format!("parameter layout does not match flow kind {kind}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ad::{grad_check, softmax_stable, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(z0: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<FlowOutput>) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let z = tape.constant(z0.clone());
        let out = f(&mut tape, z).unwrap();
        (tape.value(out.z).clone(), tape.value(out.log_det).clone())
    }

    #[test]
    fn assemble_small_cases() {
        let l = assemble_lower_unit(&[2.5], 2).unwrap();
        assert_eq!(l.as_slice(), &[1.0, 0.0, 2.5, 1.0]);
        assert_eq!(assemble_lower_unit(&[0.0; 6], 4).unwrap(), LowerUnitTriangular::identity(4));
        assert!(assemble_lower_unit(&[1.0; 5], 4).is_err());

        let l = assemble_lower_unit(&[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(l.as_slice(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 2.0, 3.0, 1.0]);
        assert_eq!(l.strict_lower(), vec![1.0, 2.0, 3.0]);
        assert_eq!(l.determinant(), 1.0);
    }

    #[test]
    fn convex_combine_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l1 = assemble_lower_unit(random(&[6], &mut rng).data(), 4).unwrap();
        assert_eq!(convex_combine(std::slice::from_ref(&l1), &[1.0]).unwrap(), l1);

        let ids = vec![LowerUnitTriangular::identity(4); 3];
        assert_eq!(convex_combine(&ids, &[0.2, 0.3, 0.5]).unwrap(), LowerUnitTriangular::identity(4));

        assert!(matches!(convex_combine(&ids, &[0.2, 0.3, 0.4]), Err(Error::Contract(_))));
        assert!(convex_combine(&ids, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn liniaf_hand_case_and_identity() {
        let z0 = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (z, ld) = run(&z0, |t, z| {
            let e = t.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
            liniaf_step(t, z, e)
        });
        assert_eq!(z.data(), &[1.0, 4.0]);
        assert_eq!(ld.data(), &[0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = random(&[3, 5], &mut rng);
        let (z, _) = run(&z0, |t, z| {
            let e = t.constant(Tensor::zeros(&[3, 10]));
            liniaf_step(t, z, e)
        });
        assert_eq!(z, z0);
    }

    #[test]
    fn ccliniaf_with_one_component_is_liniaf_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let z0 = random(&[4, 6], &mut rng);
            let e = random(&[4, 15], &mut rng);
            let logits = random(&[4, 1], &mut rng);
            let (a, _) = run(&z0, |t, z| {
                let ev = t.constant(e.clone());
                liniaf_step(t, z, ev)
            });
            let (b, ld) = run(&z0, |t, z| {
                let ev = t.constant(e.clone());
                let lv = t.constant(logits.clone());
                ccliniaf_step(t, z, ev, lv)
            });
            assert_eq!(a, b);
            assert!(ld.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ccliniaf_zero_entries_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = random(&[2, 4], &mut rng);
        let (z, _) = run(&z0, |t, z| {
            let e = t.constant(Tensor::zeros(&[2, 18]));
            let l = t.constant(random(&[2, 3], &mut ChaCha8Rng::seed_from_u64(0)));
            ccliniaf_step(t, z, e, l)
        });
        assert_eq!(z, z0);
    }

    #[test]
    fn ccliniaf_matches_convex_combination_of_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, m, k) = (3, 5, 3);
        let p = strict_lower_len(m);
        let z0 = random(&[batch, m], &mut rng);
        let e = random(&[batch, k * p], &mut rng);
        let logits = random(&[batch, k], &mut rng);
        let (z, _) = run(&z0, |t, z| {
            let ev = t.constant(e.clone());
            let lv = t.constant(logits.clone());
            ccliniaf_step(t, z, ev, lv)
        });
        for b in 0..batch {
            let y = softmax_stable(&Tensor::from_vec(logits.row(b).to_vec()).unwrap()).unwrap();
            let ls: Vec<_> = (0..k)
                .map(|c| assemble_lower_unit(&e.row(b)[c * p..(c + 1) * p], m).unwrap())
                .collect();
            let l = convex_combine(&ls, y.data()).unwrap();
            let expect = l.apply(z0.row(b));
            for (a, e) in z.row(b).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
            let back = l.solve(z.row(b));
            for (a, e) in back.iter().zip(z0.row(b)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ccliniaf_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 4]));
        let e = tape.constant(Tensor::zeros(&[2, 12]));
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(ccliniaf_step(&mut tape, z, e, l), Err(Error::Shape { .. })));
    }

    #[test]
    fn householder_fixes_orthogonal_and_negates_parallel() {
        let z0 = Tensor::from_rows(&[vec![1.0, 2.0, 0.0]]).unwrap();
        let (z, ld) = run(&z0, |t, z| {
            let v = t.constant(Tensor::from_rows(&[vec![-2.0, 1.0, 5.0]]).unwrap());
            householder_step(t, z, v)
        });
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(ld.data(), &[0.0]);

        let (z, _) = run(&z0, |t, z| {
            let v = t.constant(Tensor::from_rows(&[vec![0.5, 1.0, 0.0]]).unwrap());
            householder_step(t, z, v)
        });
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a + b).abs() < 1e-11);
        }
    }

    #[test]
    fn householder_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = random(&[5, 7], &mut rng);
        let v = random(&[5, 7], &mut rng);
        let (z, _) = run(&z0, |t, z| {
            let vv = t.constant(v.clone());
            let params = FlowParams::Householder(vec![vv, vv]);
            apply_flow(t, FlowKind::Householder { steps: 2 }, z, &params)
        });
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn planar_zero_u_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0 = random(&[3, 4], &mut rng);
        let w = random(&[3, 4], &mut rng);
        // u = 0 still leaves û = (ln 2 − 1) w/‖w‖² after reparameterization
        let (z, ld) = run(&z0, |t, z| {
            let u = t.constant(Tensor::zeros(&[3, 4]));
            let wv = t.constant(w.clone());
            let b = t.constant(Tensor::zeros(&[3]));
            planar_step(t, z, PlanarParams { u, w: wv, b })
        });
        for r in 0..3 {
            let wr = w.row(r);
            let zr = z0.row(r);
            let ww: f64 = wr.iter().map(|v| v * v).sum();
            let scale = (2f64.ln() - 1.0) / ww;
            let h = wr.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>().tanh();
            for j in 0..4 {
                let expect = zr[j] + scale * wr[j] * h;
                assert!((z.row(r)[j] - expect).abs() < 1e-14);
            }
            let uw = scale * ww;
            let expect_ld = (1.0 + uw * (1.0 - h * h)).abs().ln();
            assert!((ld.data()[r] - expect_ld).abs() < 1e-14);
        }
    }

    #[test]
    fn planar_with_vanishing_u_hat_is_identity() {
        // û = 0 when u = c·w with c‖w‖² = ln(e − 1)
        let w = [0.6, -0.8];
        let c = (std::f64::consts::E - 1.0).ln();
        let u = [c * w[0], c * w[1]];
        let z0 = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let (z, ld) = run(&z0, |t, z| {
            let u = t.constant(Tensor::from_rows(&[u.to_vec()]).unwrap());
            let w = t.constant(Tensor::from_rows(&[w.to_vec()]).unwrap());
            let b = t.constant(Tensor::from_vec(vec![0.4]).unwrap());
            planar_step(t, z, PlanarParams { u, w, b })
        });
        for (a, b) in z.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ld.data()[0].abs() < 1e-15);
    }

    #[test]
    fn planar_degenerate_w_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let u = tape.constant(Tensor::zeros(&[1, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            planar_step(&mut tape, z, PlanarParams { u, w, b }),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn planar_m1_log_det_matches_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (z0, u, w, b): (f64, f64, f64, f64) = (
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.2..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
                rng.gen_range(-1.0..1.0),
            );
            let f = |z: f64| -> (f64, f64) {
                let (zz, ld) = run(&Tensor::from_rows(&[vec![z]]).unwrap(), |t, zv| {
                    let u = t.constant(Tensor::from_rows(&[vec![u]]).unwrap());
                    let w = t.constant(Tensor::from_rows(&[vec![w]]).unwrap());
                    let b = t.constant(Tensor::from_vec(vec![b]).unwrap());
                    planar_step(t, zv, PlanarParams { u, w, b })
                });
                (zz.data()[0], ld.data()[0])
            };
            let h = 1e-5;
            let deriv = (f(z0 + h).0 - f(z0 - h).0) / (2.0 * h);
            assert!((f(z0).1 - deriv.abs().ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn step_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (batch, m, k) = (2, 4, 3);
        let p = strict_lower_len(m);
        let z0 = random(&[batch, m], &mut rng);
        let weights = random(&[batch, m], &mut rng);
        let objective = |t: &mut Tape, out: FlowOutput| -> Result<Var> {
            let w = t.constant(weights.clone());
            let zw = t.mul(out.z, w)?;
            let zw = t.tanh(zw)?;
            let s = t.sum(zw, None)?;
            let ld = t.sum(out.log_det, None)?;
            t.add(s, ld)
        };

        let cases: Vec<(FlowKind, Vec<Tensor>)> = vec![
            (FlowKind::LinIaf, vec![random(&[batch, p], &mut rng)]),
            (
                FlowKind::CcLinIaf { components: k },
                vec![random(&[batch, k * p], &mut rng), random(&[batch, k], &mut rng)],
            ),
            (FlowKind::Householder { steps: 2 }, vec![random(&[batch, 2 * m], &mut rng)]),
            (FlowKind::Planar { steps: 3 }, vec![random(&[batch, 3 * (2 * m + 1)], &mut rng)]),
        ];
        for (kind, extra) in cases {
            let mut params = vec![z0.clone()];
            params.extend(extra);
            let report = grad_check(
                |t, v| {
                    let head = Some(v[1]);
                    let gate = v.get(2).copied();
                    let fp = FlowParams::from_heads(t, kind, m, head, gate)?;
                    let out = apply_flow(t, kind, v[0], &fp)?;
                    objective(t, out)
                },
                &params,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
        }
    }

    #[test]
    fn apply_flow_none_and_layout_mismatch() {
        let z0 = Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let (z, ld) = run(&z0, |t, z| apply_flow(t, FlowKind::None, z, &FlowParams::None));
        assert_eq!(z, z0);
        assert_eq!(ld.data(), &[0.0]);

        let mut tape = Tape::new();
        let z = tape.constant(z0);
        assert!(apply_flow(&mut tape, FlowKind::LinIaf, z, &FlowParams::None).is_err());
    }

    #[test]
    fn flow_kind_widths() {
        assert_eq!(FlowKind::CcLinIaf { components: 5 }.param_width(40), 3900);
        assert_eq!(FlowKind::CcLinIaf { components: 5 }.gate_width(), 5);
        assert_eq!(FlowKind::LinIaf.param_width(40), 780);
        assert_eq!(FlowKind::Planar { steps: 2 }.param_width(3), 14);
        assert_eq!("ccliniaf:2".parse::<FlowKind>().unwrap(), FlowKind::CcLinIaf { components: 2 });
        assert_eq!("hf:10".parse::<FlowKind>().unwrap(), FlowKind::Householder { steps: 10 });
        assert!("nice".parse::<FlowKind>().is_err());
        assert!(FlowKind::LinIaf.validate_latent(1).is_err());
    }
}
