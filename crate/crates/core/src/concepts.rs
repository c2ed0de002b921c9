//! Frozen per-class layer-wise concept representations and layer-similarity
//! analysis.
//!
//! A bank holds, for each class, `L_h` vectors of width `D_h`. Generated banks
//! place each class near a prototype and let its layers wander away from it
//! by a per-class random walk, so neighbouring layers stay similar while
//! distant ones decorrelate.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::binio::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{CilmpError, Result};
use crate::params::checksum_bytes;

const BANK_MAGIC: &[u8] = b"CILMPBANK1";
const BANK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank {
    num_classes: usize,
    seq_len: usize,
    width: usize,
    data: Vec<f64>,
    class_names: Vec<String>,
    provenance: String,
}

/// Knobs of [`generate_bank`] beyond the prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSpec {
    pub seed: u64,
    pub seq_len: usize,
    pub width: usize,
    /// Per-layer random-walk step, as a fraction of a unit vector.
    pub layer_drift: f64,
    /// Independent per-row noise, as a fraction of a unit vector.
    pub noise: f64,
}

impl Default for BankSpec {
    fn default() -> Self {
        BankSpec {
            seed: 0,
            seq_len: 8,
            width: 96,
            layer_drift: 0.5,
            noise: 0.1,
        }
    }
}

impl ConceptBank {
    /// `data` is class-major, then layer-major.
    pub fn new(
        num_classes: usize,
        seq_len: usize,
        width: usize,
        data: Vec<f64>,
        class_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if num_classes == 0 || seq_len == 0 || width == 0 {
            return Err(CilmpError::Config("bank extents must be positive".into()));
        }
        let n = num_classes
            .checked_mul(seq_len)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| CilmpError::Config("bank size overflows".into()))?;
        if data.len() != n {
            return Err(CilmpError::dim("ConceptBank::new", &[num_classes, seq_len, width], &[data.len()]));
        }
        if class_names.len() != num_classes {
            return Err(CilmpError::Config(format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            )));
        }
        if let Some(bad) = class_names.iter().find(|n| n.contains('\n')) {
            return Err(CilmpError::Config(format!("class name {bad:?} contains a newline")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CilmpError::Degenerate("bank contains non-finite values".into()));
        }
        Ok(ConceptBank {
            num_classes,
            seq_len,
            width,
            data,
            class_names,
            provenance: provenance.into(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// `h_y` as an `[L_h×D_h]` tensor.
    pub fn class(&self, y: usize) -> Result<Tensor> {
        if y >= self.num_classes {
            return Err(CilmpError::Index { index: y, len: self.num_classes });
        }
        let n = self.seq_len * self.width;
        Tensor::new(vec![self.seq_len, self.width], self.data[y * n..(y + 1) * n].to_vec())
    }

    pub fn row(&self, y: usize, layer: usize) -> &[f64] {
        let start = (y * self.seq_len + layer) * self.width;
        &self.data[start..start + self.width]
    }

    /// One layer across every class, `[C×D_h]`.
    pub fn layer(&self, layer: usize) -> Result<Tensor> {
        if layer >= self.seq_len {
            return Err(CilmpError::Index { index: layer, len: self.seq_len });
        }
        let mut out = Vec::with_capacity(self.num_classes * self.width);
        for y in 0..self.num_classes {
            out.extend_from_slice(self.row(y, layer));
        }
        Tensor::new(vec![self.num_classes, self.width], out)
    }

    /// Each class collapsed to `L_h` copies of its normalised mean row.
    pub fn pooled(&self) -> Result<ConceptBank> {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.num_classes {
            let mut mean = vec![0.0; self.width];
            for l in 0..self.seq_len {
                for (m, v) in mean.iter_mut().zip(self.row(y, l)) {
                    *m += v / self.seq_len as f64;
                }
            }
            normalize(&mut mean)?;
            for _ in 0..self.seq_len {
                data.extend_from_slice(&mean);
            }
        }
        ConceptBank::new(
            self.num_classes,
            self.seq_len,
            self.width,
            data,
            self.class_names.clone(),
            format!("pooled({})", self.provenance),
        )
    }

    pub fn checksum(&self) -> u64 {
        checksum_bytes(&self.to_bytes().unwrap_or_default())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = BANK_MAGIC.to_vec();
        put_u32(&mut out, BANK_VERSION);
        put_u32(&mut out, to_u32(self.num_classes, "C")?);
        put_u32(&mut out, to_u32(self.seq_len, "L_h")?);
        put_u32(&mut out, to_u32(self.width, "D_h")?);
        put_f64s(&mut out, &self.data);
        let names = self.class_names.join("\n");
        put_u32(&mut out, to_u32(names.len(), "class-name block")?);
        out.extend_from_slice(names.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(BANK_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != BANK_VERSION {
            return Err(CilmpError::format(at, format!("unsupported bank version {version}")));
        }
        let at = r.offset();
        let c = r.u32("C")? as usize;
        let l = r.u32("L_h")? as usize;
        let d = r.u32("D_h")? as usize;
        if c == 0 || l == 0 || d == 0 {
            return Err(CilmpError::format(at, "zero bank extent"));
        }
        let n = c
            .checked_mul(l)
            .and_then(|v| v.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| CilmpError::format(at, format!("extent {c}x{l}x{d} overflows")))?;
        if r.remaining() < n * 8 + 4 {
            return Err(CilmpError::format(
                r.offset(),
                format!("header declares {c}x{l}x{d} values but only {} bytes follow", r.remaining()),
            ));
        }
        let data = r.f64s(n, "bank values")?;
        let at = r.offset();
        let len = r.u32("class-name length")? as usize;
        let block = r.take(len, "class names")?;
        r.finish()?;
        let text = std::str::from_utf8(block)
            .map_err(|e| CilmpError::format(at + 4 + e.valid_up_to(), "class names are not UTF-8"))?;
        let names: Vec<String> = if c == 1 && text.is_empty() {
            vec![String::new()]
        } else {
            text.split('\n').map(str::to_string).collect()
        };
        if names.len() != c {
            return Err(CilmpError::format(at, format!("{} class names for {c} classes", names.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CilmpError::format(at, "bank contains non-finite values"));
        }
        ConceptBank::new(c, l, d, data, names, provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path)?, path.display().to_string())
    }
}

pub fn save_bank(bank: &ConceptBank, path: impl AsRef<Path>) -> Result<()> {
    bank.save(path)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<ConceptBank> {
    ConceptBank::load(path)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return Err(CilmpError::Degenerate("cannot normalise a zero bank row".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// `h_y^l = normalize(prototype_y + walk_y(l) + noise)`, where `walk_y` is a
/// per-class Gaussian random walk over layers starting at zero.
pub fn generate_bank(spec: &BankSpec, prototypes: &Tensor, class_names: Vec<String>) -> Result<ConceptBank> {
    let c = prototypes.rows();
    if prototypes.shape().len() != 2 || c < 2 {
        return Err(CilmpError::Config("a bank needs at least two class prototypes".into()));
    }
    if prototypes.cols() != spec.width {
        return Err(CilmpError::dim("generate_bank", prototypes.shape(), &[c, spec.width]));
    }
    let mut bases = Vec::with_capacity(c * spec.seq_len * spec.width);
    for y in 0..c {
        for _ in 0..spec.seq_len {
            bases.extend_from_slice(prototypes.row(y));
        }
    }
    generate_layered_bank(spec, &Tensor::new(vec![c * spec.seq_len, spec.width], bases)?, class_names)
}

/// As [`generate_bank`] with one base row per (class, layer): `bases` is
/// `[C·L_h×D_h]`, class-major.
pub fn generate_layered_bank(spec: &BankSpec, bases: &Tensor, class_names: Vec<String>) -> Result<ConceptBank> {
    if spec.seq_len == 0 {
        return Err(CilmpError::Config("bank seq_len must be positive".into()));
    }
    let c = bases.rows() / spec.seq_len;
    if bases.shape().len() != 2 || c < 2 {
        return Err(CilmpError::Config("a bank needs at least two classes".into()));
    }
    if bases.rows() != c * spec.seq_len || bases.cols() != spec.width {
        return Err(CilmpError::dim("generate_bank", bases.shape(), &[c * spec.seq_len, spec.width]));
    }
    if !(0.0..=1.0).contains(&spec.layer_drift) || !(spec.noise >= 0.0) {
        return Err(CilmpError::Config(format!(
            "layer_drift {} must lie in [0, 1] and noise {} must be non-negative",
            spec.layer_drift, spec.noise
        )));
    }
    let d = spec.width;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let step = spec.layer_drift / (d as f64).sqrt();
    let noise = spec.noise / (d as f64).sqrt();
    let mut data = Vec::with_capacity(c * spec.seq_len * d);
    for y in 0..c {
        let mut walk = vec![0.0; d];
        for l in 0..spec.seq_len {
            if l > 0 {
                for w in walk.iter_mut() {
                    *w += step * { let g: f64 = StandardNormal.sample(&mut rng); g };
                }
            }
            let mut row: Vec<f64> = bases
                .row(y * spec.seq_len + l)
                .iter()
                .zip(&walk)
                .map(|(p, w)| p + w + noise * { let g: f64 = StandardNormal.sample(&mut rng); g })
                .collect();
            normalize(&mut row)?;
            data.extend_from_slice(&row);
        }
    }
    ConceptBank::new(c, spec.seq_len, d, data, class_names, format!("generated(seed={})", spec.seed))
}

/// Default class names `class_0, class_1, ...`.
pub fn default_class_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class_{i}")).collect()
}

fn centered(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    out
}

/// Frobenius norm squared of `aᵀ b` for row-major `a: n×p`, `b: n×q`.
fn cross_frobenius_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..q {
            let s: f64 = (0..n).map(|k| a[k * p + i] * b[k * q + j]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear centered kernel alignment between two representations of the
/// same `n` samples.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
        return Err(CilmpError::dim("cka", x.shape(), y.shape()));
    }
    let n = x.rows();
    if n < 2 {
        return Err(CilmpError::Degenerate("cka needs at least two samples".into()));
    }
    let (p, q) = (x.cols(), y.cols());
    let xc = centered(x);
    let yc = centered(y);
    if xc.iter().all(|v| *v == 0.0) || yc.iter().all(|v| *v == 0.0) {
        return Err(CilmpError::Degenerate("cka input has zero variance".into()));
    }
    let num = cross_frobenius_sq(&yc, q, &xc, p, n);
    let den = cross_frobenius_sq(&xc, p, &xc, p, n).sqrt() * cross_frobenius_sq(&yc, q, &yc, q, n).sqrt();
    if !(den > 0.0) {
        return Err(CilmpError::Degenerate("cka normaliser vanished".into()));
    }
    Ok(num / den)
}

/// Symmetric `L_h×L_h` matrix of layer-to-layer CKA values.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaMatrix {
    pub values: Tensor,
}

impl CkaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    /// Mean CKA between neighbouring layers.
    pub fn mean_adjacent(&self) -> f64 {
        let n = self.size();
        if n < 2 {
            return 1.0;
        }
        (0..n - 1).map(|i| self.get(i, i + 1)).sum::<f64>() / (n - 1) as f64
    }

    /// Mean CKA between the last layer and every earlier layer.
    pub fn mean_last_row(&self) -> f64 {
        let n = self.size();
        if n < 2 {
            return 1.0;
        }
        (0..n - 1).map(|j| self.get(n - 1, j)).sum::<f64>() / (n - 1) as f64
    }

    /// `mean_adjacent - mean_last_row`.
    pub fn margin(&self) -> f64 {
        self.mean_adjacent() - self.mean_last_row()
    }

    /// Values clamped to `[0, 1]` for display.
    pub fn display_value(&self, i: usize, j: usize) -> f64 {
        self.get(i, j).clamp(0.0, 1.0)
    }
}

/// Layer-by-layer CKA where the samples of each layer are that layer's rows
/// across all classes of the bank. `class_index` only has to name a class of
/// the bank.
pub fn cka_heatmap(bank: &ConceptBank, class_index: usize) -> Result<CkaMatrix> {
    if class_index >= bank.num_classes() {
        return Err(CilmpError::Index {
            index: class_index,
            len: bank.num_classes(),
        });
    }
    let l = bank.seq_len();
    let layers: Vec<Tensor> = (0..l).map(|i| bank.layer(i)).collect::<Result<_>>()?;
    let mut values = Tensor::zeros(&[l, l]);
    for i in 0..l {
        values.data_mut()[i * l + i] = 1.0;
        for j in i + 1..l {
            let v = cka(&layers[i], &layers[j])?;
            values.data_mut()[i * l + j] = v;
            values.data_mut()[j * l + i] = v;
        }
    }
    Ok(CkaMatrix { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn protos(c: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn(&[c, d], 1.0 / (d as f64).sqrt(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn spec(seed: u64, drift: f64, noise: f64) -> BankSpec {
        BankSpec {
            seed,
            seq_len: 6,
            width: 12,
            layer_drift: drift,
            noise,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = protos(4, 12, 1);
        let a = generate_bank(&spec(3, 0.5, 0.1), &p, default_class_names(4)).unwrap();
        let b = generate_bank(&spec(3, 0.5, 0.1), &p, default_class_names(4)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = generate_bank(&spec(4, 0.5, 0.1), &p, default_class_names(4)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn zero_drift_and_noise_repeat_the_prototype() {
        let p = protos(3, 12, 2);
        let bank = generate_bank(&spec(0, 0.0, 0.0), &p, default_class_names(3)).unwrap();
        for y in 0..3 {
            for l in 1..6 {
                assert_eq!(bank.row(y, l), bank.row(y, 0));
            }
        }
    }

    #[test]
    fn generated_layers_are_distinct_unit_rows() {
        let p = protos(3, 12, 5);
        let bank = generate_bank(&spec(1, 0.5, 0.1), &p, default_class_names(3)).unwrap();
        for y in 0..3 {
            for l in 0..6 {
                let n: f64 = bank.row(y, l).iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
                for m in 0..l {
                    assert_ne!(bank.row(y, l), bank.row(y, m));
                }
            }
        }
    }

    #[test]
    fn fewer_than_two_classes_is_rejected() {
        let p = protos(1, 12, 0);
        assert!(matches!(
            generate_bank(&spec(0, 0.5, 0.1), &p, default_class_names(1)),
            Err(CilmpError::Config(_))
        ));
    }

    #[test]
    fn cka_hand_case() {
        let x = Tensor::from_rows(&[&[1.0], &[-1.0]]).unwrap();
        let y = Tensor::from_rows(&[&[1.0], &[1.0001]]).unwrap();
        // Centred: x = [1, -1], y = [-5e-5, 5e-5].
        let (xy, xx, yy) = (-1e-4f64, 2.0f64, 5e-9f64);
        let oracle = xy * xy / (xx * yy);
        assert!((cka(&x, &y).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn cka_rejects_constant_input() {
        let x = Tensor::full(&[4, 3], 2.0);
        let y = Tensor::randn(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(cka(&x, &y), Err(CilmpError::Degenerate(_))));
    }

    #[test]
    fn heatmap_is_symmetric_with_unit_diagonal() {
        let p = protos(5, 12, 7);
        let bank = generate_bank(&spec(2, 0.5, 0.1), &p, default_class_names(5)).unwrap();
        let m = cka_heatmap(&bank, 0).unwrap();
        for i in 0..6 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..6 {
                assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-12);
                assert!((-1e-10..=1.0 + 1e-10).contains(&m.get(i, j)));
            }
        }
        assert!(matches!(cka_heatmap(&bank, 5), Err(CilmpError::Index { .. })));
    }

    #[test]
    fn more_noise_weakly_shrinks_the_layer_margin() {
        let mean_margin = |noise: f64| -> f64 {
            (0..10)
                .map(|s| {
                    let p = protos(16, 12, 100 + s);
                    let bank = generate_bank(&spec(s, 0.5, noise), &p, default_class_names(16)).unwrap();
                    cka_heatmap(&bank, 0).unwrap().margin()
                })
                .sum::<f64>()
                / 10.0
        };
        let margins: Vec<f64> = [0.0, 0.2, 0.5, 1.0].iter().map(|&n| mean_margin(n)).collect();
        for w in margins.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{margins:?}");
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let p = protos(3, 12, 9);
        let bank = generate_bank(&spec(2, 0.5, 0.1), &p, vec!["a".into(), "béta".into(), "c".into()]).unwrap();
        let bytes = bank.to_bytes().unwrap();
        let back = ConceptBank::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.data(), bank.data());
        assert_eq!(back.class_names(), bank.class_names());
        assert_eq!(back.checksum(), bank.checksum());

        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        assert!(matches!(ConceptBank::from_bytes(&bad, ""), Err(CilmpError::Format { offset: 0, .. })));

        let mut wrong_c = bytes.clone();
        wrong_c[14..18].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(ConceptBank::from_bytes(&wrong_c, ""), Err(CilmpError::Format { .. })));

        let mut huge = bytes.clone();
        huge[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[18..22].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(ConceptBank::from_bytes(&huge, ""), Err(CilmpError::Format { offset: 14, .. })));

        assert!(matches!(
            ConceptBank::from_bytes(&bytes[..bytes.len() - 1], ""),
            Err(CilmpError::Format { .. })
        ));
    }

    #[test]
    fn pooled_bank_repeats_one_row_per_class() {
        let p = protos(3, 12, 11);
        let bank = generate_bank(&spec(2, 0.5, 0.1), &p, default_class_names(3)).unwrap();
        let pooled = bank.pooled().unwrap();
        for y in 0..3 {
            for l in 1..6 {
                assert_eq!(pooled.row(y, l), pooled.row(y, 0));
            }
        }
    }

    fn orthogonal(d: usize, seed: u64) -> Tensor {
        // Gram-Schmidt on a Gaussian matrix.
        let g = Tensor::randn(&[d, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v = g.row(i).to_vec();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            q.push(v);
        }
        Tensor::new(vec![d, d], q.concat()).unwrap()
    }

    proptest! {
        #[test]
        fn cka_invariances(seed in 0u64..1000, n in 3usize..10, d in 1usize..6, alpha in 0.1f64..10.0) {
            let x = Tensor::randn(&[n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
            let xq = x.matmul(&orthogonal(d, seed + 1)).unwrap();
            prop_assert!((cka(&x, &xq).unwrap() - 1.0).abs() < 1e-10);
            let xs = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| -alpha * v).collect()).unwrap();
            prop_assert!((cka(&x, &xs).unwrap() - 1.0).abs() < 1e-10);
            let y = Tensor::randn(&[n, d + 1], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 7));
            let v = cka(&x, &y).unwrap();
            prop_assert!((-1e-10..=1.0 + 1e-10).contains(&v));
        }
    }
}
