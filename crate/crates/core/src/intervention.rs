//! Low-rank subspace interventions on concept representations.
//!
//! An intervention edits a representation only inside the row space of a
//! learnable `R`:
//!
//! ```text
//! Ψ(h)    = h + Rᵀ(W_h h + b_h − R h)
//! Ψ(h, z) = h + Rᵀ(W_t t + b_t − R h),   t = [h, h ⊙ (U V z)]
//! ```
//!
//! Rows are processed as a batch: every function here maps an `[n×D_h]`
//! matrix of representations at once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{CilmpError, Result};
use crate::params::{Binding, ParamId, ParamStore};

/// How the edit is driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    /// Conditioned on the image through the relationship descriptor.
    Conditional,
    /// Conditioned on the image, but `t = [h, U V z]` with no product term.
    ImageOnly,
    /// `Ψ(h)` with no image input.
    Unconditional,
    /// Representations pass through untouched.
    Identity,
}

impl InterventionMode {
    pub fn uses_image(self) -> bool {
        matches!(self, InterventionMode::Conditional | InterventionMode::ImageOnly)
    }

    /// Width of the input to `W` as a multiple of `D_h`, or 0 when there is no `W`.
    fn source_factor(self) -> usize {
        match self {
            InterventionMode::Conditional | InterventionMode::ImageOnly => 2,
            InterventionMode::Unconditional => 1,
            InterventionMode::Identity => 0,
        }
    }
}

/// Number of leading and trailing concept positions that are edited.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionSets {
    pub prefix: usize,
    pub suffix: usize,
}

impl PositionSets {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.prefix + self.suffix > seq_len {
            return Err(CilmpError::Config(format!(
                "prefix {} and suffix {} overlap in a sequence of {seq_len}",
                self.prefix, self.suffix
            )));
        }
        Ok(())
    }

    /// Zero-based start of the suffix block.
    pub fn suffix_start(&self, seq_len: usize) -> usize {
        seq_len - self.suffix
    }
}

/// Concrete parameter values of one side (prefix or suffix).
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionParams {
    /// `[r×D_h]`
    pub r: Tensor,
    /// `[r×2D_h]` when conditional, `[r×D_h]` when unconditional.
    pub w: Tensor,
    /// `[r]`
    pub b: Tensor,
}

/// `W_z = U V`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZProjection {
    /// `[D_h×r_z]`
    pub u: Tensor,
    /// `[r_z×D_p]`
    pub v: Tensor,
}

/// Registry handles of one side.
#[derive(Clone, Copy, Debug)]
pub struct SideIds {
    pub r: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionIds {
    pub u: ParamId,
    pub v: ParamId,
}

/// Shapes of a bilateral intervention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterventionShape {
    pub concept_dim: usize,
    pub prompt_dim: usize,
    pub rank: usize,
    pub z_rank: usize,
}

/// Registered parameters of a bilateral intervention.
#[derive(Clone, Debug)]
pub struct BilateralIds {
    pub mode: InterventionMode,
    pub positions: PositionSets,
    pub prefix: Option<SideIds>,
    pub suffix: Option<SideIds>,
    pub projection: Option<ProjectionIds>,
}

/// Rows of `g` made orthonormal by modified Gram-Schmidt. Rows that are
/// (numerically) dependent on earlier ones are zeroed and reported.
pub fn orthonormalize_rows(g: &Tensor) -> (Tensor, bool) {
    let (r, d) = (g.rows(), g.cols());
    let mut out = g.data().to_vec();
    let mut deficient = false;
    let scale = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..r {
        for j in 0..i {
            let (head, tail) = out.split_at_mut(i * d);
            let u = &head[j * d..(j + 1) * d];
            let v = &mut tail[..d];
            let p: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let v = &mut out[i * d..(i + 1) * d];
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n <= 1e-10 * scale {
            deficient = true;
            v.iter_mut().for_each(|a| *a = 0.0);
        } else {
            v.iter_mut().for_each(|a| *a /= n);
        }
    }
    (Tensor::new(vec![r, d], out).expect("same shape"), deficient)
}

fn init_side<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    shape: InterventionShape,
    mode: InterventionMode,
    rng: &mut R,
) -> SideIds {
    let (r, d) = (shape.rank, shape.concept_dim);
    let (rt, _) = orthonormalize_rows(&Tensor::randn(&[r, d], 1.0, rng));
    // W starts as [R | 0] so that the initial edit is the identity.
    let k = mode.source_factor() * d;
    let mut w = vec![0.0; r * k];
    for i in 0..r {
        w[i * k..i * k + d].copy_from_slice(rt.row(i));
    }
    SideIds {
        r: store.add(format!("{name}.R"), rt),
        w: store.add(format!("{name}.W"), Tensor::new(vec![r, k], w).expect("shape")),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[r])),
    }
}

impl BilateralIds {
    /// Registers prefix and suffix parameters and, for image-driven modes,
    /// the shared `U`, `V` factors.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        shape: InterventionShape,
        positions: PositionSets,
        mode: InterventionMode,
        rng: &mut R,
    ) -> Result<Self> {
        if mode == InterventionMode::Identity {
            return Ok(BilateralIds {
                mode,
                positions,
                prefix: None,
                suffix: None,
                projection: None,
            });
        }
        if shape.rank == 0 || shape.rank > shape.concept_dim {
            return Err(CilmpError::Config(format!(
                "intervention rank {} must lie in [1, {}]",
                shape.rank, shape.concept_dim
            )));
        }
        let prefix = init_side(store, "intervention.prefix", shape, mode, rng);
        let suffix = init_side(store, "intervention.suffix", shape, mode, rng);
        let projection = if mode.uses_image() {
            if shape.z_rank == 0 {
                return Err(CilmpError::Config("r_z must be positive".into()));
            }
            // Products h ⊙ m keep the scale of h; a bare code m matches the unit rows of h.
            let u_std = match mode {
                InterventionMode::ImageOnly => 1.0 / ((shape.z_rank * shape.concept_dim) as f64).sqrt(),
                _ => 1.0 / (shape.z_rank as f64).sqrt(),
            };
            Some(ProjectionIds {
                u: store.add(
                    "intervention.U",
                    Tensor::randn(&[shape.concept_dim, shape.z_rank], u_std, rng),
                ),
                v: store.add("intervention.V", Tensor::randn(&[shape.z_rank, shape.prompt_dim], 1.0, rng)),
            })
        } else {
            None
        };
        Ok(BilateralIds {
            mode,
            positions,
            prefix: Some(prefix),
            suffix: Some(suffix),
            projection,
        })
    }

    /// Scalar count implied by the shapes, for cross-checking the registry.
    pub fn param_count(mode: InterventionMode, shape: InterventionShape) -> usize {
        let (r, d) = (shape.rank, shape.concept_dim);
        let side = r * d + r * mode.source_factor() * d + r;
        match mode {
            InterventionMode::Identity => 0,
            InterventionMode::Unconditional => 2 * side,
            _ => 2 * side + d * shape.z_rank + shape.z_rank * shape.prompt_dim,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for s in [self.prefix, self.suffix].into_iter().flatten() {
            out.extend([s.r, s.w, s.b]);
        }
        if let Some(p) = self.projection {
            out.extend([p.u, p.v]);
        }
        out
    }

    /// `W_z z` for each row of `z` (`[B×D_p]` to `[B×D_h]`).
    pub fn image_code(&self, tape: &mut Tape, b: &Binding, z: Var) -> Result<Option<Var>> {
        match self.projection {
            Some(p) => Ok(Some(project_image(tape, b[p.u], b[p.v], z)?)),
            None => Ok(None),
        }
    }

    /// Applies the intervention to `h_seq` (`[L_h×D_h]`) given one image code
    /// `m = W_z z` (`[1×D_h]`) when the mode needs it.
    pub fn apply(&self, tape: &mut Tape, b: &Binding, h_seq: Var, m: Option<Var>) -> Result<Var> {
        let bind = |s: Option<SideIds>| s.map(|s| (b[s.r], b[s.w], b[s.b]));
        apply_bilateral_vars(
            tape,
            h_seq,
            m,
            bind(self.prefix),
            bind(self.suffix),
            self.positions,
            self.mode,
        )
    }
}

/// `z Vᵀ Uᵀ`, i.e. `U V z` for each row of `z`.
pub fn project_image(tape: &mut Tape, u: Var, v: Var, z: Var) -> Result<Var> {
    let vz = tape.matmul_nt(z, v)?;
    tape.matmul_nt(vz, u)
}

fn broadcast_rows(tape: &mut Tape, m: Var, n: usize) -> Result<Var> {
    if tape.shape(m)[0] == n {
        return Ok(m);
    }
    if tape.shape(m)[0] != 1 {
        return Err(CilmpError::dim("broadcast_rows", tape.shape(m), &[n]));
    }
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    tape.matmul(ones, m)
}

/// `[h, h ⊙ m]` row-wise, with `m` either a single `[1×D_h]` row or one
/// row per row of `h`.
pub fn descriptor_rows(tape: &mut Tape, h: Var, m: Var) -> Result<Var> {
    let n = tape.shape(h)[0];
    let mb = broadcast_rows(tape, m, n)?;
    let prod = tape.hadamard(h, mb)?;
    tape.concat(&[h, prod], 1)
}

/// `[h, m]` row-wise: image conditioning without the product term.
pub fn image_only_rows(tape: &mut Tape, h: Var, m: Var) -> Result<Var> {
    let n = tape.shape(h)[0];
    let mb = broadcast_rows(tape, m, n)?;
    tape.concat(&[h, mb], 1)
}

/// `H + (S Wᵀ + 1 bᵀ − H Rᵀ) R` for rows `H` and sources `S`.
pub fn intervene_rows(tape: &mut Tape, h: Var, source: Var, r: Var, w: Var, bias: Var) -> Result<Var> {
    let target = tape.matmul_nt(source, w)?;
    let target = tape.add_row(target, bias)?;
    let read = tape.matmul_nt(h, r)?;
    let diff = tape.sub(target, read)?;
    let edit = tape.matmul(diff, r)?;
    tape.add(h, edit)
}

pub(crate) type SideVars = (Var, Var, Var);

pub(crate) fn side_rows(
    tape: &mut Tape,
    h: Var,
    m: Option<Var>,
    side: SideVars,
    mode: InterventionMode,
) -> Result<Var> {
    let (r, w, bias) = side;
    let need = || CilmpError::Config("image-conditioned intervention without an image code".into());
    let source = match mode {
        InterventionMode::Conditional => descriptor_rows(tape, h, m.ok_or_else(need)?)?,
        InterventionMode::ImageOnly => image_only_rows(tape, h, m.ok_or_else(need)?)?,
        InterventionMode::Unconditional => h,
        InterventionMode::Identity => return Ok(h),
    };
    intervene_rows(tape, h, source, r, w, bias)
}

/// Bilateral intervention over an `[L_h×D_h]` sequence. Rows outside the
/// prefix and suffix blocks are passed through.
pub fn apply_bilateral_vars(
    tape: &mut Tape,
    h_seq: Var,
    m: Option<Var>,
    prefix: Option<SideVars>,
    suffix: Option<SideVars>,
    pos: PositionSets,
    mode: InterventionMode,
) -> Result<Var> {
    let l = tape.shape(h_seq)[0];
    pos.validate(l)?;
    if mode == InterventionMode::Identity || pos.prefix + pos.suffix == 0 {
        return Ok(h_seq);
    }
    let missing = || CilmpError::Config("intervention parameters missing".into());
    let mut parts = Vec::with_capacity(3);
    if pos.prefix > 0 {
        let rows = tape.rows(h_seq, 0, pos.prefix)?;
        parts.push(side_rows(tape, rows, m, prefix.ok_or_else(missing)?, mode)?);
    }
    let mid = l - pos.prefix - pos.suffix;
    if mid > 0 {
        parts.push(tape.rows(h_seq, pos.prefix, mid)?);
    }
    if pos.suffix > 0 {
        let rows = tape.rows(h_seq, pos.suffix_start(l), pos.suffix)?;
        parts.push(side_rows(tape, rows, m, suffix.ok_or_else(missing)?, mode)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 0)
}

fn as_row(t: &Tensor) -> Result<Tensor> {
    Tensor::new(vec![1, t.numel()], t.data().to_vec())
}

fn to_vector(tape: &Tape, v: Var) -> Tensor {
    Tensor::vector(tape.value(v).data().to_vec())
}

fn check_proj(proj: &ZProjection, d_h: usize, z: &Tensor) -> Result<()> {
    if proj.u.rows() != d_h || proj.u.cols() != proj.v.rows() || proj.v.cols() != z.numel() {
        return Err(CilmpError::dim("relationship_descriptor", proj.u.shape(), proj.v.shape()));
    }
    Ok(())
}

fn check_side(p: &InterventionParams, d_h: usize, k: usize) -> Result<()> {
    let r = p.r.rows();
    if p.r.cols() != d_h || p.w.shape() != [r, k] || p.b.numel() != r {
        return Err(CilmpError::dim("intervene", p.r.shape(), p.w.shape()));
    }
    Ok(())
}

/// `t = [h, h ⊙ (U V z)]`.
pub fn relationship_descriptor(h: &Tensor, z: &Tensor, proj: &ZProjection) -> Result<Tensor> {
    check_proj(proj, h.numel(), z)?;
    let mut tape = Tape::new();
    let hv = tape.constant(as_row(h)?);
    let zv = tape.constant(as_row(z)?);
    let (u, v) = (tape.constant(proj.u.clone()), tape.constant(proj.v.clone()));
    let m = project_image(&mut tape, u, v, zv)?;
    let t = descriptor_rows(&mut tape, hv, m)?;
    Ok(to_vector(&tape, t))
}

fn bind_side(tape: &mut Tape, p: &InterventionParams) -> Result<SideVars> {
    let b = as_row(&p.b)?;
    Ok((tape.constant(p.r.clone()), tape.constant(p.w.clone()), tape.constant(b)))
}

/// `Ψ(h) = h + Rᵀ(W_h h + b_h − R h)`.
pub fn intervene_unconditional(h: &Tensor, p: &InterventionParams) -> Result<Tensor> {
    check_side(p, h.numel(), h.numel())?;
    let mut tape = Tape::new();
    let hv = tape.constant(as_row(h)?);
    let side = bind_side(&mut tape, p)?;
    let out = side_rows(&mut tape, hv, None, side, InterventionMode::Unconditional)?;
    Ok(to_vector(&tape, out))
}

/// `Ψ(h, z) = h + Rᵀ(W_t t + b_t − R h)`.
pub fn intervene_conditional(
    h: &Tensor,
    z: &Tensor,
    p: &InterventionParams,
    proj: &ZProjection,
) -> Result<Tensor> {
    check_side(p, h.numel(), 2 * h.numel())?;
    check_proj(proj, h.numel(), z)?;
    let mut tape = Tape::new();
    let hv = tape.constant(as_row(h)?);
    let zv = tape.constant(as_row(z)?);
    let (u, v) = (tape.constant(proj.u.clone()), tape.constant(proj.v.clone()));
    let m = project_image(&mut tape, u, v, zv)?;
    let side = bind_side(&mut tape, p)?;
    let out = side_rows(&mut tape, hv, Some(m), side, InterventionMode::Conditional)?;
    Ok(to_vector(&tape, out))
}

/// Tensor-level bilateral intervention over `h_seq: [L_h×D_h]`.
pub fn apply_bilateral(
    h_seq: &Tensor,
    z: &Tensor,
    prefix: &InterventionParams,
    suffix: &InterventionParams,
    proj: Option<&ZProjection>,
    pos: PositionSets,
    mode: InterventionMode,
) -> Result<Tensor> {
    let d = h_seq.cols();
    if mode != InterventionMode::Identity {
        let k = mode.source_factor() * d;
        check_side(prefix, d, k)?;
        check_side(suffix, d, k)?;
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h_seq.clone());
    let m = match (mode.uses_image(), proj) {
        (true, Some(p)) => {
            check_proj(p, d, z)?;
            let zv = tape.constant(as_row(z)?);
            let (u, v) = (tape.constant(p.u.clone()), tape.constant(p.v.clone()));
            Some(project_image(&mut tape, u, v, zv)?)
        }
        (true, None) => {
            return Err(CilmpError::Config("image-conditioned mode needs U and V".into()));
        }
        _ => None,
    };
    let (pv, sv) = if mode == InterventionMode::Identity {
        (None, None)
    } else {
        (Some(bind_side(&mut tape, prefix)?), Some(bind_side(&mut tape, suffix)?))
    };
    let out = apply_bilateral_vars(&mut tape, hv, m, pv, sv, pos, mode)?;
    Ok(tape.value(out).clone())
}

/// Distance of an edit from the row space of `R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubspaceResidual {
    pub residual: f64,
    pub rank_deficient: bool,
}

/// `‖Δ − Π Δ‖₂` with `Δ = h̄ − h` and `Π` the projector onto the row space
/// of `R`.
pub fn subspace_residual(h: &Tensor, h_bar: &Tensor, r: &Tensor) -> Result<SubspaceResidual> {
    if h.numel() != h_bar.numel() || r.cols() != h.numel() {
        return Err(CilmpError::dim("subspace_residual", h.shape(), r.shape()));
    }
    let (q, rank_deficient) = orthonormalize_rows(r);
    let mut delta: Vec<f64> = h_bar.data().iter().zip(h.data()).map(|(a, b)| a - b).collect();
    let proj = delta.clone();
    for i in 0..q.rows() {
        let u = q.row(i);
        let p: f64 = u.iter().zip(&proj).map(|(a, b)| a * b).sum();
        delta.iter_mut().zip(u).for_each(|(d, b)| *d -= p * b);
    }
    Ok(SubspaceResidual {
        residual: delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn random_side(d: usize, r: usize, k: usize, g: &mut ChaCha8Rng) -> InterventionParams {
        InterventionParams {
            r: Tensor::randn(&[r, d], 1.0, g),
            w: Tensor::randn(&[r, k], 1.0, g),
            b: Tensor::randn(&[r], 1.0, g),
        }
    }

    #[test]
    fn descriptor_hand_case() {
        let h = Tensor::vector(vec![1.0, 2.0]);
        let z = Tensor::vector(vec![1.0]);
        let proj = ZProjection {
            u: Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap(),
            v: Tensor::from_rows(&[&[1.0]]).unwrap(),
        };
        let t = relationship_descriptor(&h, &z, &proj).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 8.0]);

        let ones = ZProjection {
            u: Tensor::ones(&[2, 1]),
            v: Tensor::ones(&[1, 1]),
        };
        let t = relationship_descriptor(&h, &z, &ones).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 1.0, 2.0]);
        let t = relationship_descriptor(&Tensor::zeros(&[2]), &z, &proj).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn unconditional_hand_cases() {
        let h = Tensor::vector(vec![1.0, 0.0]);
        let p = InterventionParams {
            r: Tensor::from_rows(&[&[1.0, 0.0]]).unwrap(),
            w: Tensor::from_rows(&[&[2.0, 0.0]]).unwrap(),
            b: Tensor::vector(vec![1.0]),
        };
        assert_eq!(intervene_unconditional(&h, &p).unwrap().data(), &[3.0, 0.0]);

        let mut g = rng(1);
        let h = Tensor::randn(&[4], 1.0, &mut g);
        let zero_r = InterventionParams {
            r: Tensor::zeros(&[2, 4]),
            w: Tensor::randn(&[2, 4], 1.0, &mut g),
            b: Tensor::randn(&[2], 1.0, &mut g),
        };
        assert_eq!(intervene_unconditional(&h, &zero_r).unwrap(), h);

        // W = R and b = 0 make W h + b = R h.
        let r = Tensor::randn(&[2, 4], 1.0, &mut g);
        let fixed = InterventionParams {
            r: r.clone(),
            w: r,
            b: Tensor::zeros(&[2]),
        };
        assert!(intervene_unconditional(&h, &fixed).unwrap().max_abs_diff(&h) < 1e-15);
    }

    #[test]
    fn conditional_with_zero_map_projects_out_the_subspace() {
        let mut g = rng(2);
        let (d, r) = (5, 2);
        let (rt, _) = orthonormalize_rows(&Tensor::randn(&[r, d], 1.0, &mut g));
        let p = InterventionParams {
            r: rt.clone(),
            w: Tensor::zeros(&[r, 2 * d]),
            b: Tensor::zeros(&[r]),
        };
        let proj = ZProjection {
            u: Tensor::randn(&[d, 3], 1.0, &mut g),
            v: Tensor::randn(&[3, 4], 1.0, &mut g),
        };
        let h = Tensor::randn(&[d], 1.0, &mut g);
        let z = Tensor::randn(&[4], 1.0, &mut g);
        let out = intervene_conditional(&h, &z, &p, &proj).unwrap();
        // Oracle: (I − RᵀR) h.
        let rtr = rt.transpose().matmul(&rt).unwrap();
        let expect: Vec<f64> = (0..d)
            .map(|i| h.data()[i] - (0..d).map(|j| rtr.get(i, j) * h.data()[j]).sum::<f64>())
            .collect();
        assert!(out.max_abs_diff(&Tensor::vector(expect)) < 1e-14);
    }

    #[test]
    fn conditional_fixed_point_and_determinism() {
        let mut g = rng(3);
        let (d, r) = (4, 2);
        let rt = Tensor::randn(&[r, d], 1.0, &mut g);
        let mut w = vec![0.0; r * 2 * d];
        for i in 0..r {
            w[i * 2 * d..i * 2 * d + d].copy_from_slice(rt.row(i));
        }
        let p = InterventionParams {
            r: rt,
            w: Tensor::new(vec![r, 2 * d], w).unwrap(),
            b: Tensor::zeros(&[r]),
        };
        let proj = ZProjection {
            u: Tensor::randn(&[d, 2], 1.0, &mut g),
            v: Tensor::randn(&[2, 3], 1.0, &mut g),
        };
        let h = Tensor::randn(&[d], 1.0, &mut g);
        let z = Tensor::randn(&[3], 1.0, &mut g);
        let out = intervene_conditional(&h, &z, &p, &proj).unwrap();
        assert!(out.max_abs_diff(&h) < 1e-14);
        let again = intervene_conditional(&h, &z.clone(), &p, &proj).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn bilateral_locality_and_identity() {
        let mut g = rng(4);
        let (l, d, r, dp) = (6, 5, 2, 3);
        let h = Tensor::randn(&[l, d], 1.0, &mut g);
        let z = Tensor::randn(&[dp], 1.0, &mut g);
        let pre = random_side(d, r, 2 * d, &mut g);
        let suf = random_side(d, r, 2 * d, &mut g);
        let proj = ZProjection {
            u: Tensor::randn(&[d, 2], 1.0, &mut g),
            v: Tensor::randn(&[2, dp], 1.0, &mut g),
        };
        let pos = PositionSets { prefix: 2, suffix: 1 };
        let out = apply_bilateral(&h, &z, &pre, &suf, Some(&proj), pos, InterventionMode::Conditional).unwrap();
        for i in 2..5 {
            assert_eq!(out.row(i), h.row(i));
        }
        for i in [0, 1, 5] {
            assert_ne!(out.row(i), h.row(i));
        }
        let none = PositionSets { prefix: 0, suffix: 0 };
        assert_eq!(
            apply_bilateral(&h, &z, &pre, &suf, Some(&proj), none, InterventionMode::Conditional).unwrap(),
            h
        );
        assert_eq!(
            apply_bilateral(&h, &z, &pre, &suf, None, pos, InterventionMode::Identity).unwrap(),
            h
        );
        let overlap = PositionSets { prefix: 4, suffix: 3 };
        assert!(matches!(
            apply_bilateral(&h, &z, &pre, &suf, Some(&proj), overlap, InterventionMode::Conditional),
            Err(CilmpError::Config(_))
        ));
    }

    #[test]
    fn conditional_depends_on_image_but_unconditional_does_not() {
        let mut g = rng(5);
        let (l, d, r, dp) = (4, 6, 2, 3);
        let h = Tensor::randn(&[l, d], 1.0, &mut g);
        let z1 = Tensor::randn(&[dp], 1.0, &mut g);
        let z2 = Tensor::randn(&[dp], 1.0, &mut g);
        let proj = ZProjection {
            u: Tensor::randn(&[d, 2], 1.0, &mut g),
            v: Tensor::randn(&[2, dp], 1.0, &mut g),
        };
        let pos = PositionSets { prefix: 2, suffix: 2 };
        let pre = random_side(d, r, 2 * d, &mut g);
        let suf = random_side(d, r, 2 * d, &mut g);
        let a = apply_bilateral(&h, &z1, &pre, &suf, Some(&proj), pos, InterventionMode::Conditional).unwrap();
        let b = apply_bilateral(&h, &z2, &pre, &suf, Some(&proj), pos, InterventionMode::Conditional).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-8);
        let pre = random_side(d, r, d, &mut g);
        let suf = random_side(d, r, d, &mut g);
        let a = apply_bilateral(&h, &z1, &pre, &suf, None, pos, InterventionMode::Unconditional).unwrap();
        let b = apply_bilateral(&h, &z2, &pre, &suf, None, pos, InterventionMode::Unconditional).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn registered_init_is_the_identity_edit() {
        let mut store = ParamStore::new();
        let shape = InterventionShape {
            concept_dim: 6,
            prompt_dim: 4,
            rank: 3,
            z_rank: 2,
        };
        let pos = PositionSets { prefix: 2, suffix: 2 };
        let ids = BilateralIds::register(&mut store, shape, pos, InterventionMode::Conditional, &mut rng(6)).unwrap();
        assert_eq!(
            store.total_count(),
            BilateralIds::param_count(InterventionMode::Conditional, shape)
        );
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let h = tape.constant(Tensor::randn(&[5, 6], 1.0, &mut rng(7)));
        let z = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng(8)));
        let m = ids.image_code(&mut tape, &b, z).unwrap();
        let out = ids.apply(&mut tape, &b, h, m).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(h)) < 1e-14);
    }

    #[test]
    fn gradients_reach_parameters_but_not_inputs() {
        let mut store = ParamStore::new();
        let shape = InterventionShape {
            concept_dim: 5,
            prompt_dim: 3,
            rank: 2,
            z_rank: 2,
        };
        let pos = PositionSets { prefix: 2, suffix: 2 };
        let ids = BilateralIds::register(&mut store, shape, pos, InterventionMode::Conditional, &mut rng(9)).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let h = tape.constant(Tensor::randn(&[4, 5], 1.0, &mut rng(10)));
        let z = tape.constant(Tensor::randn(&[1, 3], 1.0, &mut rng(11)));
        let m = ids.image_code(&mut tape, &b, z).unwrap();
        let out = ids.apply(&mut tape, &b, h, m).unwrap();
        let sq = tape.hadamard(out, out).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        for id in ids.ids() {
            assert!(grads.get(b[id]).is_some(), "{}", store.name(id));
        }
        assert!(grads.get(h).is_none());
        assert!(grads.get(z).is_none());
    }

    #[test]
    fn residual_flags_rank_deficiency() {
        let r = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]).unwrap();
        let h = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let hb = Tensor::vector(vec![1.0, 1.0, 0.0]);
        let res = subspace_residual(&h, &hb, &r).unwrap();
        assert!(res.rank_deficient);
        assert!((res.residual - 1.0).abs() < 1e-15);
        let same = subspace_residual(&h, &h, &r).unwrap();
        assert_eq!(same.residual, 0.0);
    }

    proptest! {
        #[test]
        fn edits_stay_in_the_row_space(seed in 0u64..10_000, d in 2usize..8, r in 1usize..4) {
            let r = r.min(d);
            let mut g = rng(seed);
            let h = Tensor::randn(&[d], 1.0, &mut g);
            let z = Tensor::randn(&[3], 1.0, &mut g);
            let proj = ZProjection {
                u: Tensor::randn(&[d, 2], 1.0, &mut g),
                v: Tensor::randn(&[2, 3], 1.0, &mut g),
            };
            let pc = random_side(d, r, 2 * d, &mut g);
            let out = intervene_conditional(&h, &z, &pc, &proj).unwrap();
            prop_assert!(subspace_residual(&h, &out, &pc.r).unwrap().residual <= 1e-9);
            let pu = random_side(d, r, d, &mut g);
            let out = intervene_unconditional(&h, &pu).unwrap();
            prop_assert!(subspace_residual(&h, &out, &pu.r).unwrap().residual <= 1e-9);
        }
    }
}
