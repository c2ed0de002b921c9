use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ExperimentConfig;
use crate::autodiff::Tensor;
use crate::concepts::{default_class_names, generate_layered_bank, ConceptBank};
use crate::encoders::{vocab, TokenSequence};
use crate::error::Result;

/// Independent random streams derived from one experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stream {
    World = 1,
    TrainImages = 2,
    TestImages = 3,
    PretrainPairs = 4,
    Knowledge = 5,
    BankNoise = 6,
    EncoderInit = 7,
    PretrainOrder = 8,
    PromptInit = 9,
    TuneOrder = 10,
}

pub(crate) fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// Each `[image_tokens×D_p]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_refs(&self) -> Vec<&Tensor> {
        self.images.iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub classes: usize,
    pub train: Split,
    pub test: Split,
    pub pretrain_images: Vec<Tensor>,
    pub pretrain_captions: Vec<TokenSequence>,
    /// Unit attribute directions in token space, `[A×D_p]`.
    pub attribute_prototypes: Tensor,
    /// Attributes owned by each class, in bank order.
    pub class_attributes: Vec<Vec<usize>>,
    /// Mean token of a class, `margin ×` the mean of its attribute
    /// directions, `[C×D_p]`.
    pub class_prototypes: Tensor,
    pub class_tokens: Vec<usize>,
    /// Fixed map carrying an attribute direction into concept space,
    /// `[D_p×D_h]`.
    pub knowledge_map: Tensor,
}

impl SyntheticDataset {
    pub fn attribute_token(&self, attribute: usize) -> usize {
        vocab::FIRST_FREE + self.classes + attribute
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn unit_gaussian(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    unit((0..d).map(|_| gaussian(rng)).collect())
}

/// One image showing `shown` attributes, cycled over the token rows.
fn render(cfg: &ExperimentConfig, protos: &Tensor, shown: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (t, d) = (cfg.encoder.image_tokens, cfg.encoder.embed_dim);
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t {
        let u = protos.row(shown[i % shown.len()]);
        data.extend(u.iter().map(|&x| cfg.data.margin * x + cfg.data.noise * gaussian(rng)));
    }
    Tensor::new(vec![t, d], data).expect("shape matches data")
}

fn pick(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

fn split(cfg: &ExperimentConfig, protos: &Tensor, owned: &[Vec<usize>], per_class: usize, seen: usize, mut rng: ChaCha8Rng) -> Split {
    let mut images = Vec::with_capacity(owned.len() * per_class);
    let mut labels = Vec::with_capacity(owned.len() * per_class);
    for _ in 0..per_class {
        for (y, attrs) in owned.iter().enumerate() {
            let shown = pick(&attrs[..seen], cfg.data.attributes_per_image, &mut rng);
            images.push(render(cfg, protos, &shown, &mut rng));
            labels.push(y);
        }
    }
    Split { images, labels }
}

/// Builds the world of `cfg`: tuning splits, pretraining pairs, and a
/// concept bank whose rows describe the attributes of each class.
///
/// Pretraining captions name the attributes an image shows; their filler
/// words are the generic token or a random class name, so class names are
/// familiar to the text tower but carry no visual meaning.
///
/// Class `y` owns attributes `y·K .. (y+1)·K`; the remaining ids are
/// background attributes seen only in pretraining. Bank row `l` of class `y`
/// is `unit(ρ·unit(M u_a) + √(1−ρ²)·n_l)` for `a` the `(l mod K)`-th
/// attribute of `y` and `ρ = knowledge_corr`, where `n` is a drifting unit
/// sequence shared by all classes. At `ρ = 0` every class sees the same rows.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<(SyntheticDataset, ConceptBank)> {
    cfg.validate()?;
    let c = cfg.classes;
    let d = cfg.encoder.embed_dim;
    let k = cfg.data.attributes_per_class;
    let n_attr = cfg.attribute_count();

    let mut rng = stream(cfg.seed, Stream::World);
    let mut protos = Vec::with_capacity(n_attr * d);
    for _ in 0..n_attr {
        protos.extend(unit_gaussian(d, &mut rng));
    }
    let protos = Tensor::new(vec![n_attr, d], protos)?;
    let owned: Vec<Vec<usize>> = (0..c).map(|y| (y * k..(y + 1) * k).collect()).collect();
    let mut class_protos = Vec::with_capacity(c * d);
    for attrs in &owned {
        for j in 0..d {
            let mean = attrs.iter().map(|&a| protos.row(a)[j]).sum::<f64>() / k as f64;
            class_protos.push(cfg.data.margin * mean);
        }
    }
    let class_prototypes = Tensor::new(vec![c, d], class_protos)?;

    let train = split(cfg, &protos, &owned, cfg.data.train_per_class, cfg.data.seen_attributes, stream(cfg.seed, Stream::TrainImages));
    let test = split(cfg, &protos, &owned, cfg.data.test_per_class, k, stream(cfg.seed, Stream::TestImages));

    let mut rng = stream(cfg.seed, Stream::PretrainPairs);
    let all: Vec<usize> = (0..n_attr).collect();
    let mut pretrain_images = Vec::with_capacity(cfg.data.pretrain_pairs);
    let mut pretrain_captions = Vec::with_capacity(cfg.data.pretrain_pairs);
    for _ in 0..cfg.data.pretrain_pairs {
        let shown = pick(&all, cfg.data.attributes_per_image, &mut rng);
        pretrain_images.push(render(cfg, &protos, &shown, &mut rng));
        let mut words: Vec<usize> = (0..cfg.data.caption_len - 1)
            .map(|_| if rng.random_bool(0.5) { vocab::GENERIC } else { vocab::FIRST_FREE + rng.random_range(0..c) })
            .collect();
        let mut slots = sample(&mut rng, words.len(), shown.len()).into_vec();
        slots.sort_unstable();
        for (&slot, &a) in slots.iter().zip(&shown) {
            words[slot] = vocab::FIRST_FREE + c + a;
        }
        pretrain_captions.push(TokenSequence::terminated(&words));
    }

    let (bank_len, width) = (cfg.bank.seq_len, cfg.bank.width);
    let mut rng = stream(cfg.seed, Stream::Knowledge);
    let common = unit_gaussian(width, &mut rng);
    let scale = 1.0 / (d as f64).sqrt();
    let map: Vec<f64> = (0..d * width).map(|_| scale * gaussian(&mut rng)).collect();
    let knowledge_map = Tensor::new(vec![d, width], map)?;
    let background = background_sequence(cfg, &common, stream(cfg.seed, Stream::BankNoise))?;
    let rho = cfg.data.knowledge_corr;
    let rest = (1.0 - rho * rho).max(0.0).sqrt();
    let mut rows = Vec::with_capacity(c * bank_len * width);
    for attrs in &owned {
        for l in 0..bank_len {
            let signal = unit(project(protos.row(attrs[l % k]), &knowledge_map));
            let row: Vec<f64> = signal.iter().zip(background.row(l)).map(|(s, n)| rho * s + rest * n).collect();
            rows.extend(unit(row));
        }
    }
    let bank = ConceptBank::new(
        c,
        bank_len,
        width,
        rows,
        default_class_names(c),
        format!("synthetic(seed={}, knowledge_corr={rho})", cfg.seed),
    )?;

    let dataset = SyntheticDataset {
        classes: c,
        train,
        test,
        pretrain_images,
        pretrain_captions,
        attribute_prototypes: protos,
        class_attributes: owned,
        class_prototypes,
        class_tokens: (0..c).map(|y| vocab::FIRST_FREE + y).collect(),
        knowledge_map,
    };
    Ok((dataset, bank))
}

/// One layered sequence shared by every class: a drifting bank started at
/// `bank_common·common + ξ`, each row unit length.
fn background_sequence(cfg: &ExperimentConfig, common: &[f64], mut rng: ChaCha8Rng) -> Result<Tensor> {
    let (len, width) = (cfg.bank.seq_len, cfg.bank.width);
    let start: Vec<f64> = unit_gaussian(width, &mut rng)
        .iter()
        .zip(common)
        .map(|(x, g)| x + cfg.data.bank_common * g)
        .collect();
    let mut bases = Vec::with_capacity(2 * len * width);
    for _ in 0..2 * len {
        bases.extend_from_slice(&start);
    }
    let bases = Tensor::new(vec![2 * len, width], bases)?;
    let bank = generate_layered_bank(&cfg.bank.spec(rng.random()), &bases, default_class_names(2))?;
    bank.class(0)
}

/// `u M` for a row vector `u`.
pub(crate) fn project(u: &[f64], m: &Tensor) -> Vec<f64> {
    let w = m.cols();
    let mut out = vec![0.0; w];
    for (i, &ui) in u.iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += ui * mij;
        }
    }
    out
}
