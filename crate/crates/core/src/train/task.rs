//! Synthetic multi-label tasks with known latent concepts.
//!
//! Each sample draws binary latent concepts, embeds them as
//! `x = Σ_s latent_s · basis_s + noise`, and labels each class with a DNF
//! over the latents. The shifted split rotates every basis vector by a
//! fixed angle out of the original span and scales the noise.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provenance::FileHeader;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task: {0}")]
    Spec(String),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub latent_concepts: usize,
    pub classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub shifted_size: usize,
    /// Bernoulli rate of every latent concept.
    pub concept_prob: f64,
    /// DNF terms per class formula, inclusive range.
    pub terms_min: usize,
    pub terms_max: usize,
    /// Literals per term, inclusive range.
    pub literals_min: usize,
    pub literals_max: usize,
    /// Probability that a literal is negated.
    pub negation_prob: f64,
    pub noise_sigma: f64,
    pub label_flip_prob: f64,
    pub shift_angle_deg: f64,
    pub shift_noise_scale: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            input_dim: 64,
            latent_concepts: 12,
            classes: 6,
            train_size: 8000,
            val_size: 2000,
            shifted_size: 2000,
            concept_prob: 0.5,
            terms_min: 1,
            terms_max: 2,
            literals_min: 2,
            literals_max: 4,
            negation_prob: 0.25,
            noise_sigma: 0.0,
            label_flip_prob: 0.0,
            shift_angle_deg: 15.0,
            shift_noise_scale: 1.5,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn check(&self) -> Result<(), TaskError> {
        let mut errs = Vec::new();
        if self.input_dim == 0 || self.latent_concepts == 0 || self.classes == 0 {
            errs.push("input_dim, latent_concepts and classes must be positive".to_string());
        }
        if self.latent_concepts > self.input_dim {
            errs.push(format!(
                "latent_concepts ({}) cannot exceed input_dim ({})",
                self.latent_concepts, self.input_dim
            ));
        }
        if self.shifted_size > 0 && self.shift_angle_deg != 0.0 && 2 * self.latent_concepts > self.input_dim {
            errs.push(format!(
                "a rotated basis needs input_dim ≥ 2·latent_concepts ({} < {})",
                self.input_dim,
                2 * self.latent_concepts
            ));
        }
        if self.terms_min == 0 || self.terms_min > self.terms_max {
            errs.push("need 1 ≤ terms_min ≤ terms_max".into());
        }
        if self.literals_min == 0 || self.literals_min > self.literals_max {
            errs.push("need 1 ≤ literals_min ≤ literals_max".into());
        }
        if self.literals_max > self.latent_concepts {
            errs.push("literals_max cannot exceed latent_concepts".into());
        }
        for (name, p) in [
            ("concept_prob", self.concept_prob),
            ("negation_prob", self.negation_prob),
            ("label_flip_prob", self.label_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.shift_noise_scale >= 0.0) {
            errs.push("noise_sigma and shift_noise_scale must be ≥ 0".into());
        }
        if !self.shift_angle_deg.is_finite() {
            errs.push("shift_angle_deg must be finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TaskError::Spec(errs.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Literal {
    pub concept: usize,
    pub negated: bool,
}

/// A disjunction of conjunctions of literals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formula {
    pub terms: Vec<Vec<Literal>>,
}

impl Formula {
    pub fn eval(&self, latent: &[bool]) -> bool {
        self.terms
            .iter()
            .any(|t| t.iter().all(|l| latent[l.concept] != l.negated))
    }
}

impl std::fmt::Display for Formula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let terms: Vec<String> = self
            .terms
            .iter()
            .map(|t| {
                let lits: Vec<String> = t
                    .iter()
                    .map(|l| format!("{}c{}", if l.negated { "¬" } else { "" }, l.concept))
                    .collect();
                format!("({})", lits.join(" ∧ "))
            })
            .collect();
        f.write_str(&terms.join(" ∨ "))
    }
}

/// A generated task: the spec, its basis and its class formulas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// `[latent_concepts × input_dim]`, orthonormal rows.
    pub basis: Tensor,
    /// Basis used for the shifted split.
    pub shifted_basis: Tensor,
    pub formulas: Vec<Formula>,
}

/// Samples of one split, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[n × input_dim]`.
    pub x: Tensor,
    /// `[n × classes]`, 0/1.
    pub labels: Tensor,
    /// `[n × latent_concepts]`, 0/1. Only evaluation reads these.
    pub latents: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn latent_concepts(&self) -> usize {
        self.latents.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let pick = |t: &Tensor| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(indices.len(), cols, data).expect("sized")
        };
        Dataset {
            name: self.name.clone(),
            x: pick(&self.x),
            labels: pick(&self.labels),
            latents: pick(&self.latents),
        }
    }

    /// Fraction of positive labels per class.
    pub fn label_rates(&self) -> Vec<f64> {
        let (n, k) = (self.len(), self.classes());
        (0..k)
            .map(|c| (0..n).map(|i| self.labels.at(i, c)).sum::<f64>() / n.max(1) as f64)
            .collect()
    }
}

/// Gram-Schmidt on Gaussian draws: `rows` orthonormal vectors in `R^dim`.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}

fn generate_formulas(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Formula>, TaskError> {
    // Term sizes first, so coverage can be checked before drawing concepts.
    let shapes: Vec<Vec<usize>> = (0..spec.classes)
        .map(|_| {
            let terms = rng.random_range(spec.terms_min..=spec.terms_max);
            (0..terms)
                .map(|_| rng.random_range(spec.literals_min..=spec.literals_max))
                .collect()
        })
        .collect();
    let slots: usize = shapes.iter().flatten().sum();
    if slots < spec.latent_concepts {
        return Err(TaskError::Spec(format!(
            "formulas have {slots} literal slots, fewer than the {} latent concepts",
            spec.latent_concepts
        )));
    }
    // Concepts are dealt from reshuffled decks, so each appears before any repeats.
    let mut deck: Vec<usize> = Vec::new();
    let mut formulas = Vec::with_capacity(spec.classes);
    for class_shape in shapes {
        let mut terms = Vec::with_capacity(class_shape.len());
        for size in class_shape {
            let mut term: Vec<Literal> = Vec::with_capacity(size);
            while term.len() < size {
                if deck.is_empty() {
                    deck = (0..spec.latent_concepts).collect();
                    deck.shuffle(rng);
                }
                let pos = deck
                    .iter()
                    .rposition(|c| term.iter().all(|l| l.concept != *c));
                let concept = match pos {
                    Some(p) => deck.remove(p),
                    None => {
                        // Deck holds only concepts already in this term.
                        let fresh: Vec<usize> = (0..spec.latent_concepts)
                            .filter(|c| term.iter().all(|l| l.concept != *c))
                            .collect();
                        fresh[rng.random_range(0..fresh.len())]
                    }
                };
                term.push(Literal {
                    concept,
                    negated: false,
                });
            }
            term.sort_by_key(|l| l.concept);
            // At least one positive literal per term.
            let keep = rng.random_range(0..term.len());
            for (i, l) in term.iter_mut().enumerate() {
                l.negated = i != keep && rng.random_bool(spec.negation_prob);
            }
            terms.push(term);
        }
        formulas.push(Formula { terms });
    }
    Ok(formulas)
}

impl SyntheticTask {
    pub fn generate(spec: &TaskSpec) -> Result<Self, TaskError> {
        spec.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (s, f) = (spec.latent_concepts, spec.input_dim);
        let shifted_needed = spec.shift_angle_deg != 0.0 && spec.shifted_size > 0;
        let frame = orthonormal_rows(&mut rng, if shifted_needed { 2 * s } else { s }, f);
        let basis = Tensor::from_rows(&frame[..s]).expect("rows");
        let shifted_basis = if shifted_needed {
            let (c, sn) = {
                let a = spec.shift_angle_deg.to_radians();
                (a.cos(), a.sin())
            };
            let rows: Vec<Vec<f64>> = (0..s)
                .map(|i| {
                    frame[i]
                        .iter()
                        .zip(&frame[s + i])
                        .map(|(b, u)| c * b + sn * u)
                        .collect()
                })
                .collect();
            Tensor::from_rows(&rows).expect("rows")
        } else {
            basis.clone()
        };
        let formulas = generate_formulas(spec, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            basis,
            shifted_basis,
            formulas,
        })
    }

    /// Draws `n` samples with the given basis and noise level from `rng`.
    pub fn sample(
        &self,
        name: &str,
        n: usize,
        basis: &Tensor,
        noise_sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Dataset {
        let spec = &self.spec;
        let (s, f, k) = (spec.latent_concepts, spec.input_dim, spec.classes);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut x = Vec::with_capacity(n * f);
        let mut labels = Vec::with_capacity(n * k);
        let mut latents = Vec::with_capacity(n * s);
        let mut latent = vec![false; s];
        for _ in 0..n {
            for l in latent.iter_mut() {
                *l = rng.random_bool(spec.concept_prob);
            }
            let mut row = vec![0.0; f];
            for (c, &on) in latent.iter().enumerate() {
                if on {
                    row.iter_mut().zip(basis.row(c)).for_each(|(r, b)| *r += b);
                }
            }
            if noise_sigma > 0.0 {
                row.iter_mut()
                    .for_each(|r| *r += noise_sigma * normal.sample(rng));
            }
            x.extend(row);
            for formula in &self.formulas {
                let mut y = formula.eval(&latent);
                if spec.label_flip_prob > 0.0 && rng.random_bool(spec.label_flip_prob) {
                    y = !y;
                }
                labels.push(if y { 1.0 } else { 0.0 });
            }
            latents.extend(latent.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        Dataset {
            name: name.to_string(),
            x: Tensor::matrix(n, f, x).expect("sized"),
            labels: Tensor::matrix(n, k, labels).expect("sized"),
            latents: Tensor::matrix(n, s, latents).expect("sized"),
        }
    }

    /// Train, validation and shifted validation splits, each from its own
    /// seed-derived stream.
    pub fn splits(&self) -> (Dataset, Dataset, Dataset) {
        let spec = &self.spec;
        let stream = |i: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i);
            rng
        };
        let train = self.sample("train", spec.train_size, &self.basis, spec.noise_sigma, &mut stream(1));
        let val = self.sample("val", spec.val_size, &self.basis, spec.noise_sigma, &mut stream(2));
        let shifted = self.sample(
            "shifted",
            spec.shifted_size,
            &self.shifted_basis,
            spec.noise_sigma * spec.shift_noise_scale,
            &mut stream(3),
        );
        (train, val, shifted)
    }
}

/// `generate_task`: task plus its three splits.
pub fn generate_task(spec: &TaskSpec) -> Result<(SyntheticTask, Dataset, Dataset, Dataset), TaskError> {
    let task = SyntheticTask::generate(spec)?;
    let (a, b, c) = task.splits();
    Ok((task, a, b, c))
}

const MAGIC: &[u8; 8] = b"KLUEDSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    header: FileHeader,
    name: String,
    samples: usize,
    features: usize,
    classes: usize,
    latent_concepts: usize,
}

impl Dataset {
    /// Binary container: magic, version, JSON header length and header,
    /// then little-endian `f64` features and `u8` labels and latents.
    pub fn write_binary<W: Write>(&self, header: &FileHeader, mut w: W) -> Result<(), TaskError> {
        let meta = DatasetHeader {
            header: header.clone(),
            name: self.name.clone(),
            samples: self.len(),
            features: self.features(),
            classes: self.classes(),
            latent_concepts: self.latent_concepts(),
        };
        let json = serde_json::to_vec(&meta).expect("header serializes");
        w.write_all(MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.x.numel() * 8 + self.labels.numel() + self.latents.numel());
        for v in self.x.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(self.labels.data().iter().map(|&v| (v > 0.5) as u8));
        buf.extend(self.latents.data().iter().map(|&v| (v > 0.5) as u8));
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<(FileHeader, Dataset), TaskError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TaskError::Format("not a dataset file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != DATASET_VERSION {
            return Err(TaskError::Format(format!(
                "dataset version {version} is not supported (expected {DATASET_VERSION})"
            )));
        }
        r.read_exact(&mut word)?;
        let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut json)?;
        let meta: DatasetHeader =
            serde_json::from_slice(&json).map_err(|e| TaskError::Format(e.to_string()))?;
        let (n, f, k, s) = (meta.samples, meta.features, meta.classes, meta.latent_concepts);
        let mut xb = vec![0u8; n * f * 8];
        r.read_exact(&mut xb)?;
        let x = xb
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut lb = vec![0u8; n * k + n * s];
        r.read_exact(&mut lb)?;
        let bits = |b: &[u8]| b.iter().map(|&v| v as f64).collect::<Vec<_>>();
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(TaskError::Format(format!("{} trailing bytes", rest.len())));
        }
        let shape_err = |e: crate::AutodiffError| TaskError::Format(e.to_string());
        Ok((
            meta.header,
            Dataset {
                name: meta.name,
                x: Tensor::matrix(n, f, x).map_err(shape_err)?,
                labels: Tensor::matrix(n, k, bits(&lb[..n * k])).map_err(shape_err)?,
                latents: Tensor::matrix(n, s, bits(&lb[n * k..])).map_err(shape_err)?,
            },
        ))
    }

    /// CSV with a provenance comment line, then `x*`, `y*` and `c*` columns.
    pub fn write_csv<W: Write>(&self, header: &FileHeader, mut w: W) -> Result<(), TaskError> {
        writeln!(w, "{}", header.comment_line())?;
        let mut cols: Vec<String> = (0..self.features()).map(|i| format!("x{i}")).collect();
        cols.extend((0..self.classes()).map(|i| format!("y{i}")));
        cols.extend((0..self.latent_concepts()).map(|i| format!("c{i}")));
        writeln!(w, "{}", cols.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.x.row(i).iter().map(|v| format!("{v}")).collect();
            fields.extend(self.labels.row(i).iter().map(|v| format!("{}", *v as u8)));
            fields.extend(self.latents.row(i).iter().map(|v| format!("{}", *v as u8)));
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}
