//! Linear projection heads with L2-normalized output.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{norm, Vector};
use crate::error::{Error, Result};

/// `x ↦ normalize(W x + b)`, `W` stored row-major (`out_dim × in_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Parameter-shaped gradient of a [`ProjectionHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros_like(head: &ProjectionHead) -> Self {
        HeadGrad {
            weight: vec![0.0; head.weight.len()],
            bias: vec![0.0; head.bias.len()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|g| *g *= factor);
    }

    /// Weights then bias, flattened.
    pub fn flatten(&self) -> Vec<f64> {
        self.weight.iter().chain(&self.bias).copied().collect()
    }
}

impl ProjectionHead {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Contract("projection head dimensions must be positive".into()));
        }
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Contract(format!(
                "head {out_dim}x{in_dim} needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("projection head parameter".into()));
        }
        Ok(ProjectionHead {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        ProjectionHead {
            in_dim: dim,
            out_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Entries uniform in `[-1/√in_dim, 1/√in_dim]`, zero bias.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        ProjectionHead {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::Contract(format!(
                "head expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Pre-normalization output `W x + b`.
    pub fn linear(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self
            .weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect())
    }

    /// Backpropagate `d_out` (gradient w.r.t. the normalized output) for
    /// input `x` into `grad`.
    pub fn accumulate_grad(&self, x: &[f64], d_out: &[f64], grad: &mut HeadGrad) -> Result<()> {
        let z = self.linear(x)?;
        let n = norm(&z);
        if n == 0.0 {
            return Ok(());
        }
        let u: Vec<f64> = z.iter().map(|v| v / n).collect();
        let radial: f64 = u.iter().zip(d_out).map(|(a, b)| a * b).sum();
        for (i, (ui, gi)) in u.iter().zip(d_out).enumerate() {
            let dz = (gi - ui * radial) / n;
            grad.bias[i] += dz;
            let row = &mut grad.weight[i * self.in_dim..(i + 1) * self.in_dim];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += dz * xi;
            }
        }
        Ok(())
    }

    /// `θ ← θ − lr·∇`.
    pub fn apply(&mut self, grad: &HeadGrad, lr: f64) {
        for (p, g) in self.weight.iter_mut().zip(&grad.weight) {
            *p -= lr * g;
        }
        for (p, g) in self.bias.iter_mut().zip(&grad.bias) {
            *p -= lr * g;
        }
    }

    /// `dim_in dim_out` header, then one weight row per line, then the bias.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.in_dim, self.out_dim);
        for row in self.weight.chunks_exact(self.in_dim) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        let bias: Vec<String> = self.bias.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}", bias.join(" "));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut dim = |name: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Contract(format!("head file: missing or invalid {name}")))
        };
        let in_dim = dim("dim_in")?;
        let out_dim = dim("dim_out")?;
        let values = tokens
            .map(|t| t.parse::<f64>().map_err(|_| Error::Contract(format!("head file: bad float {t:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != in_dim * out_dim + out_dim {
            return Err(Error::Contract(format!(
                "head file: expected {} values, found {}",
                in_dim * out_dim + out_dim,
                values.len()
            )));
        }
        let (w, b) = values.split_at(in_dim * out_dim);
        ProjectionHead::new(in_dim, out_dim, w.to_vec(), b.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        ProjectionHead::from_text(&text)
    }
}

/// `normalize(W v + b)`. A degenerate (zero) pre-activation maps to the
/// zero vector.
pub fn project(head: &ProjectionHead, v: &[f64]) -> Result<Vector> {
    let z = head.linear(v)?;
    let n = norm(&z);
    if n == 0.0 {
        return Ok(Vector::zeros(head.out_dim));
    }
    Ok(Vector::from(z.into_iter().map(|x| x / n).collect::<Vec<f64>>()))
}

/// The five trainable heads. Question, entity, relation and answer heads map
/// word vectors into the shared space; the fusion head maps
/// `[question ; image feature]` into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub question: ProjectionHead,
    pub entity: ProjectionHead,
    pub relation: ProjectionHead,
    pub answer: ProjectionHead,
    pub fusion: ProjectionHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadsGrad {
    pub question: HeadGrad,
    pub entity: HeadGrad,
    pub relation: HeadGrad,
    pub answer: HeadGrad,
    pub fusion: HeadGrad,
}

pub const HEAD_NAMES: [&str; 5] = ["question", "entity", "relation", "answer", "fusion"];

impl Heads {
    /// Seeded initialization, each head from its own ChaCha stream.
    pub fn seeded(embed_dim: usize, image_dim: usize, shared_dim: usize, seed: u64) -> Self {
        let head = |stream: u64, in_dim: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            ProjectionHead::seeded(in_dim, shared_dim, &mut rng)
        };
        Heads {
            question: head(0, embed_dim),
            entity: head(1, embed_dim),
            relation: head(2, embed_dim),
            answer: head(3, embed_dim),
            fusion: head(4, embed_dim + image_dim),
        }
    }

    /// Identity word heads; the fusion head keeps the question block and
    /// drops the image block.
    pub fn identity(embed_dim: usize, image_dim: usize) -> Self {
        let in_dim = embed_dim + image_dim;
        let mut weight = vec![0.0; embed_dim * in_dim];
        for i in 0..embed_dim {
            weight[i * in_dim + i] = 1.0;
        }
        Heads {
            question: ProjectionHead::identity(embed_dim),
            entity: ProjectionHead::identity(embed_dim),
            relation: ProjectionHead::identity(embed_dim),
            answer: ProjectionHead::identity(embed_dim),
            fusion: ProjectionHead {
                in_dim,
                out_dim: embed_dim,
                weight,
                bias: vec![0.0; embed_dim],
            },
        }
    }

    pub fn zero_grad(&self) -> HeadsGrad {
        HeadsGrad {
            question: HeadGrad::zeros_like(&self.question),
            entity: HeadGrad::zeros_like(&self.entity),
            relation: HeadGrad::zeros_like(&self.relation),
            answer: HeadGrad::zeros_like(&self.answer),
            fusion: HeadGrad::zeros_like(&self.fusion),
        }
    }

    pub fn apply(&mut self, grad: &HeadsGrad, lr: f64) {
        self.question.apply(&grad.question, lr);
        self.entity.apply(&grad.entity, lr);
        self.relation.apply(&grad.relation, lr);
        self.answer.apply(&grad.answer, lr);
        self.fusion.apply(&grad.fusion, lr);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &ProjectionHead)> {
        HEAD_NAMES
            .into_iter()
            .zip([&self.question, &self.entity, &self.relation, &self.answer, &self.fusion])
    }

    /// Write `<name>.txt` for every head into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (name, head) in self.iter() {
            head.save(dir.join(format!("{name}.txt")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |name: &str| ProjectionHead::load(dir.join(format!("{name}.txt")));
        Ok(Heads {
            question: load("question")?,
            entity: load("entity")?,
            relation: load("relation")?,
            answer: load("answer")?,
            fusion: load("fusion")?,
        })
    }
}

impl HeadsGrad {
    pub fn scale(&mut self, factor: f64) {
        for g in [
            &mut self.question,
            &mut self.entity,
            &mut self.relation,
            &mut self.answer,
            &mut self.fusion,
        ] {
            g.scale(factor);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        [&self.question, &self.entity, &self.relation, &self.answer, &self.fusion]
            .into_iter()
            .flat_map(HeadGrad::flatten)
            .collect()
    }
}
