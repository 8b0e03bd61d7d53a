//! Classifier and conditioned-generator architectures.
//!
//! Parameters are stored in `f32` between updates and promoted to `f64`
//! when bound to a tape.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LEAKY_SLOPE: f64 = 0.01;
const GEN_LEAKY_SLOPE: f64 = 0.2;

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "param",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Param {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            data: vec![0.0; numel],
        }
    }

    fn uniform(name: String, shape: Vec<usize>, bound: f64, rng: &mut Stream) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        Param { name, shape, data }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("param shape is validated at construction")
    }
}

fn bind_params(params: &[Param], tape: &Tape, trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if trainable {
                tape.param(p.to_tensor())
            } else {
                tape.constant(p.to_tensor())
            }
        })
        .collect()
}

/// Affine layer `x·W + b` with `W: [in, out]`.
fn affine(tape: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_along(y, b, 1)
}

fn check_batch(op: &'static str, got: &[usize], expect: [usize; 3]) -> Result<usize> {
    if got.len() != 4 || got[1..] != expect {
        return Err(Error::dim(
            op,
            format!("expected [B, {}, {}, {}], got {got:?}", expect[0], expect[1], expect[2]),
        ));
    }
    Ok(got[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClassifierKind {
    Mlp { hidden: Vec<usize> },
    /// Two 3×3 conv blocks (each followed by 2×2 max-pool) and one hidden affine layer.
    Cnn { filters: [usize; 2], hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    /// Channels, height, width.
    pub input: [usize; 3],
    pub classes: usize,
}

impl ClassifierSpec {
    pub fn mlp(input: [usize; 3], classes: usize) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::Mlp {
                hidden: vec![256, 128],
            },
            input,
            classes,
        }
    }

    pub fn cnn(input: [usize; 3], classes: usize) -> Self {
        ClassifierSpec {
            kind: ClassifierKind::Cnn {
                filters: [8, 16],
                hidden: 64,
            },
            input,
            classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        match &self.kind {
            ClassifierKind::Mlp { hidden } => *hidden.last().unwrap_or(&0),
            ClassifierKind::Cnn { hidden, .. } => *hidden,
        }
    }

    fn cnn_flat_len(&self, filters: [usize; 2]) -> usize {
        filters[1] * (self.input[1] / 4) * (self.input[2] / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Contract(format!("classifier needs at least 2 outputs, got {}", self.classes)));
        }
        if self.input.contains(&0) {
            return Err(Error::Contract(format!("empty input shape {:?}", self.input)));
        }
        match &self.kind {
            ClassifierKind::Mlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::Contract("MLP needs at least one non-empty hidden layer".into()));
                }
            }
            ClassifierKind::Cnn { filters, hidden } => {
                if self.input[1] < 4 || self.input[2] < 4 {
                    return Err(Error::Contract(format!(
                        "CNN input {:?} too small for two 2×2 pools",
                        self.input
                    )));
                }
                if filters.contains(&0) || *hidden == 0 {
                    return Err(Error::Contract("CNN widths must be positive".into()));
                }
            }
        }
        if self.feature_dim() < 2 {
            return Err(Error::Contract("penultimate feature width must be at least 2".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let m = self.classes;
        match &self.kind {
            ClassifierKind::Mlp { hidden } => {
                let mut widths = vec![self.input_len()];
                widths.extend(hidden);
                widths.push(m);
                widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
            }
            ClassifierKind::Cnn { filters, hidden } => {
                let c = self.input[0];
                let [f1, f2] = *filters;
                let flat = self.cnn_flat_len(*filters);
                (f1 * c * 9 + f1) + (f2 * f1 * 9 + f2) + (flat * hidden + hidden) + (hidden * m + m)
            }
        }
    }

    fn init_params(&self, rng: &mut Stream) -> Vec<Param> {
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let mut params = Vec::new();
        let dense = |params: &mut Vec<Param>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Stream| {
            params.push(Param::uniform(format!("{name}.weight"), vec![fan_in, fan_out], he(fan_in), rng));
            params.push(Param::zeros(format!("{name}.bias"), vec![fan_out]));
        };
        match &self.kind {
            ClassifierKind::Mlp { hidden } => {
                let mut widths = vec![self.input_len()];
                widths.extend(hidden);
                widths.push(self.classes);
                for (l, w) in widths.windows(2).enumerate() {
                    dense(&mut params, &format!("fc{}", l + 1), w[0], w[1], rng);
                }
            }
            ClassifierKind::Cnn { filters, hidden } => {
                let c = self.input[0];
                let [f1, f2] = *filters;
                params.push(Param::uniform("conv1.weight".into(), vec![f1, c, 3, 3], he(c * 9), rng));
                params.push(Param::zeros("conv1.bias", vec![f1]));
                params.push(Param::uniform("conv2.weight".into(), vec![f2, f1, 3, 3], he(f1 * 9), rng));
                params.push(Param::zeros("conv2.bias", vec![f2]));
                dense(&mut params, "fc1", self.cnn_flat_len(*filters), *hidden, rng);
                dense(&mut params, "fc2", *hidden, self.classes, rng);
            }
        }
        params
    }
}

/// Output of one classifier pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub logits: Var,
    /// Penultimate activations.
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    spec: ClassifierSpec,
    params: Vec<Param>,
    frozen: bool,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, rng: &mut Stream) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(rng);
        Ok(Classifier {
            spec,
            params,
            frozen: false,
        })
    }

    pub fn from_params(spec: ClassifierSpec, params: Vec<Param>) -> Result<Self> {
        spec.validate()?;
        let mut scratch = seed::from_seed(0);
        let expect = spec.init_params(&mut scratch);
        if expect.len() != params.len()
            || expect
                .iter()
                .zip(&params)
                .any(|(e, p)| e.name() != p.name() || e.shape() != p.shape())
        {
            return Err(Error::Consistency(
                "parameter names or shapes do not match the classifier architecture".into(),
            ));
        }
        Ok(Classifier {
            spec,
            params,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Zero the logit layer so every input maps to uniform probabilities.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.data_mut().fill(0.0);
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        bind_params(&self.params, tape, trainable)
    }

    pub fn forward(&self, tape: &Tape, params: &[Var], batch: Var) -> Result<ClassifierOutput> {
        let shape = tape.shape(batch);
        let b = check_batch("classifier_forward", &shape, self.spec.input)?;
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        match &self.spec.kind {
            ClassifierKind::Mlp { hidden } => {
                let mut h = tape.reshape(batch, &[b, self.spec.input_len()])?;
                for l in 0..hidden.len() {
                    h = affine(tape, h, params[2 * l], params[2 * l + 1])?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                }
                let k = 2 * hidden.len();
                let logits = affine(tape, h, params[k], params[k + 1])?;
                Ok(ClassifierOutput { logits, features: h })
            }
            ClassifierKind::Cnn { filters, .. } => {
                let mut h = batch;
                for blk in 0..2 {
                    h = tape.conv2d(h, params[2 * blk], 1, 1)?;
                    h = tape.add_along(h, params[2 * blk + 1], 1)?;
                    h = tape.leaky_relu(h, LEAKY_SLOPE);
                    h = tape.max_pool(h, 2)?;
                }
                let h = tape.reshape(h, &[b, self.spec.cnn_flat_len(*filters)])?;
                let h = affine(tape, h, params[4], params[5])?;
                let features = tape.leaky_relu(h, LEAKY_SLOPE);
                let logits = affine(tape, features, params[6], params[7])?;
                Ok(ClassifierOutput { logits, features })
            }
        }
    }

    /// Inference: logits and features for a batch of images.
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&tape, &params, x)?;
        Ok(((*tape.value(out.logits)).clone(), (*tape.value(out.features)).clone()))
    }

    /// Softmax probabilities `[N × m]`, evaluated in chunks.
    pub fn predict_probs(&self, images: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = *images
            .shape()
            .first()
            .ok_or_else(|| Error::dim("predict_probs", "scalar input"))?;
        let mut data = Vec::with_capacity(n * self.classes());
        let mut start = 0;
        while start < n {
            let rows: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let batch = images.select_rows(&rows)?;
            let tape = Tape::new();
            let params = self.bind(&tape, false);
            let x = tape.constant(batch);
            let out = self.forward(&tape, &params, x)?;
            let p = tape.softmax(out.logits)?;
            data.extend_from_slice(tape.value(p).data());
            start += CHUNK;
        }
        Tensor::new(vec![n, self.classes()], data)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CondMode {
    /// One-hot label of length `classes`.
    Hot,
    /// One-hot label passed through a fixed random projection to `dim` entries.
    Hidden { dim: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub z_dim: usize,
    pub cond: CondMode,
    pub classes: usize,
    pub dropout: f64,
    pub hidden: Vec<usize>,
    /// Channels, height, width.
    pub output: [usize; 3],
}

impl GeneratorSpec {
    pub fn new(classes: usize, output: [usize; 3], cond: CondMode) -> Self {
        GeneratorSpec {
            z_dim: 64,
            cond,
            classes,
            dropout: 0.5,
            hidden: vec![128, 256],
            output,
        }
    }

    pub fn hidden_cond(classes: usize, output: [usize; 3], seed: u64) -> Self {
        Self::new(classes, output, CondMode::Hidden { dim: 32, seed })
    }

    pub fn cond_len(&self) -> usize {
        match self.cond {
            CondMode::Hot => self.classes,
            CondMode::Hidden { dim, .. } => dim,
        }
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.z_dim == 0 || self.cond_len() == 0 {
            return Err(Error::Contract("generator dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hidden.contains(&0) || self.output.contains(&0) {
            return Err(Error::Contract("generator widths must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.z_dim + self.cond_len()];
        w.extend(&self.hidden);
        w.push(self.output_len());
        w
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn init_params(&self, rng: &mut Stream) -> Vec<Param> {
        let widths = self.widths();
        let mut params = Vec::new();
        for (l, w) in widths.windows(2).enumerate() {
            let bound = (6.0 / w[0] as f64).sqrt();
            params.push(Param::uniform(format!("fc{}.weight", l + 1), vec![w[0], w[1]], bound, rng));
            params.push(Param::zeros(format!("fc{}.bias", l + 1), vec![w[1]]));
        }
        params
    }

    /// `classes × dim` matrix with orthonormal rows (when `classes ≤ dim`), scaled by `√dim`.
    fn projection(&self, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::from_seed(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        for _ in 0..self.classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if rows.len() < dim {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    for (x, y) in v.iter_mut().zip(r) {
                        *x -= dot * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
        let gain = (dim as f64).sqrt();
        rows.into_iter()
            .map(|r| r.into_iter().map(|x| x * gain).collect())
            .collect()
    }
}

/// Encoded conditioning input for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    pub label: usize,
    pub encoded: Vec<f64>,
}

/// Encode `label` for a generator with this spec.
pub fn make_condition(label: usize, spec: &GeneratorSpec) -> Result<ConditionVector> {
    if label >= spec.classes {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            spec.classes
        )));
    }
    let encoded = match spec.cond {
        CondMode::Hot => {
            let mut v = vec![0.0; spec.classes];
            v[label] = 1.0;
            v
        }
        CondMode::Hidden { dim, seed } => spec.projection(dim, seed).swap_remove(label),
    };
    Ok(ConditionVector { label, encoded })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    params: Vec<Param>,
    codes: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, rng: &mut Stream) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(rng);
        Self::assemble(spec, params)
    }

    pub fn from_params(spec: GeneratorSpec, params: Vec<Param>) -> Result<Self> {
        spec.validate()?;
        let expect = spec.init_params(&mut seed::from_seed(0));
        if expect.len() != params.len()
            || expect
                .iter()
                .zip(&params)
                .any(|(e, p)| e.name() != p.name() || e.shape() != p.shape())
        {
            return Err(Error::Consistency(
                "parameter names or shapes do not match the generator architecture".into(),
            ));
        }
        Self::assemble(spec, params)
    }

    fn assemble(spec: GeneratorSpec, params: Vec<Param>) -> Result<Self> {
        let codes = (0..spec.classes)
            .map(|l| make_condition(l, &spec).map(|c| c.encoded))
            .collect::<Result<_>>()?;
        Ok(Generator { spec, params, codes })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn condition(&self, label: usize) -> Result<ConditionVector> {
        let encoded = self
            .codes
            .get(label)
            .ok_or_else(|| Error::Domain(format!("label {label} out of range for {} classes", self.spec.classes)))?
            .clone();
        Ok(ConditionVector { label, encoded })
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        bind_params(&self.params, tape, trainable)
    }

    /// Standard-normal latent batch `[n × z_dim]`.
    pub fn sample_latent(&self, n: usize, rng: &mut Stream) -> Tensor {
        Tensor::from_fn(&[n, self.spec.z_dim], |_| rng.sample(StandardNormal))
    }

    /// Images `[B × C × H × W]` in `[0, 1]`. Train mode applies dropout and
    /// requires an RNG stream.
    pub fn forward(
        &self,
        tape: &Tape,
        params: &[Var],
        z: &Tensor,
        conds: &[ConditionVector],
        mode: Mode,
        rng: Option<&mut Stream>,
    ) -> Result<Var> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.spec.z_dim {
            return Err(Error::dim(
                "generator_forward",
                format!("latent {zs:?} does not match z_dim {}", self.spec.z_dim),
            ));
        }
        if conds.len() != zs[0] {
            return Err(Error::dim(
                "generator_forward",
                format!("{} latents but {} conditions", zs[0], conds.len()),
            ));
        }
        let clen = self.spec.cond_len();
        if let Some(c) = conds.iter().find(|c| c.encoded.len() != clen) {
            return Err(Error::dim(
                "generator_forward",
                format!("condition of length {} where {clen} expected", c.encoded.len()),
            ));
        }
        let mut rng = match (mode, rng) {
            (Mode::Train, None) if self.spec.dropout > 0.0 => {
                return Err(Error::Contract("train-mode generation needs an RNG stream".into()))
            }
            (_, r) => r,
        };
        let b = zs[0];
        let width = self.spec.z_dim + clen;
        let mut input = Vec::with_capacity(b * width);
        for (row, c) in z.data().chunks(self.spec.z_dim).zip(conds) {
            input.extend_from_slice(row);
            input.extend_from_slice(&c.encoded);
        }
        let mut h = tape.constant(Tensor::new(vec![b, width], input)?);
        let layers = self.spec.hidden.len();
        for l in 0..layers {
            h = affine(tape, h, params[2 * l], params[2 * l + 1])?;
            h = tape.leaky_relu(h, GEN_LEAKY_SLOPE);
            if mode == Mode::Train {
                if let Some(r) = rng.as_deref_mut() {
                    h = tape.dropout(h, self.spec.dropout, r)?;
                }
            }
        }
        let out = affine(tape, h, params[2 * layers], params[2 * layers + 1])?;
        let img = tape.sigmoid(out);
        let [c, hh, ww] = self.spec.output;
        tape.reshape(img, &[b, c, hh, ww])
    }

    /// Convenience: generate images for the given labels outside any training graph.
    pub fn generate(&self, labels: &[usize], mode: Mode, rng: &mut Stream) -> Result<Tensor> {
        let z = self.sample_latent(labels.len(), rng);
        let conds = labels
            .iter()
            .map(|&l| self.condition(l))
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let img = self.forward(&tape, &params, &z, &conds, mode, Some(rng))?;
        Ok((*tape.value(img)).clone())
    }
}
