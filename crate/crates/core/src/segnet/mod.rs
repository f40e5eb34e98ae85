//! Four-level U-Net used for both the student and the teacher.
//!
//! Encoder block `i` (width `base_width * 2^i`): two Conv3x3-BN-ReLU units,
//! then 2x2 max-pooling and dropout. Decoder block: bilinear 2x upsampling,
//! concatenation with the matching encoder output, two Conv3x3-BN-ReLU
//! units. A 1x1 convolution and a channel softmax produce the probabilities.
//!
//! Backpropagation is explicit: [`SegNetwork::forward_traced`] records what
//! [`SegNetwork::backward`] needs and never mutates the network, so several
//! traced forwards can share one parameter snapshot within a training step.

mod checkpoint;
pub(crate) mod layers;
mod params;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint_bytes, save_checkpoint, write_checkpoint_bytes, Checkpoint};
pub use params::{Gradients, Param, ParamKind, ParamSet};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::{ImageBatch, ProbMap, Tensor4};
use layers::{BatchStats, BnCache};

pub const DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub dropout_rate: f64,
    pub upsample: Upsample,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: DEPTH,
            in_channels: 3,
            num_classes: 2,
            base_width: 32,
            dropout_rate: 0.5,
            upsample: Upsample::Bilinear,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth != DEPTH {
            return Err(Error::Config(format!(
                "network.depth = {} is unsupported (only {DEPTH})",
                self.depth
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config(
                "network.in_channels and network.base_width must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("network.num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("network.dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; DEPTH] {
        std::array::from_fn(|i| self.base_width << i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter indices of one Conv3x3-BN-ReLU unit.
#[derive(Clone, Copy, Debug)]
struct Unit {
    in_ch: usize,
    out_ch: usize,
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    /// Forward order: encoder units `0..8`, then decoder units from the
    /// deepest level upwards.
    units: Vec<Unit>,
    head_weight: usize,
    head_bias: usize,
}

impl Layout {
    fn encoder(&self, level: usize) -> [Unit; 2] {
        [self.units[2 * level], self.units[2 * level + 1]]
    }

    /// Decoder units for the block that restores resolution `level`.
    fn decoder(&self, level: usize) -> [Unit; 2] {
        let k = DEPTH - 1 - level;
        [self.units[2 * DEPTH + 2 * k], self.units[2 * DEPTH + 2 * k + 1]]
    }
}

#[derive(Clone, Debug)]
pub struct SegNetwork<T> {
    config: NetworkConfig,
    params: ParamSet<T>,
    layout: Layout,
}

#[derive(Clone, Debug)]
struct UnitTrace<T> {
    input: Tensor4<T>,
    bn: BnCache<T>,
    output: Tensor4<T>,
}

/// Everything a train-mode forward needs to be differentiated, plus the
/// batch statistics it observed.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    units: Vec<UnitTrace<T>>,
    pool_arg: Vec<Vec<u8>>,
    pool_input_shape: Vec<[usize; 4]>,
    dropout_masks: Vec<Option<Vec<T>>>,
    up_channels: Vec<usize>,
    head_input: Tensor4<T>,
    probs: Tensor4<T>,
}

impl<T> Trace<T> {
    fn batch_stats(&self) -> impl Iterator<Item = &BatchStats<T>> {
        self.units.iter().map(|u| &u.bn.stats)
    }
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, len: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}

impl<T: Scalar> SegNetwork<T> {
    /// Builds a network with He-uniform kernels, zero biases, unit BN scale
    /// and zero BN shift. Identical `(config, seed)` give identical bits.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::StudentInit);
        Self::build_with(config, &mut rng)
    }

    pub fn build_with<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let mut params = ParamSet::new();
        let mut units = Vec::with_capacity(4 * DEPTH);

        let add_unit = |params: &mut ParamSet<T>, rng: &mut R, prefix: String, in_ch: usize, out_ch: usize| {
            let fan_in = in_ch * 9;
            let weight = params.push(
                format!("{prefix}.conv.weight"),
                vec![out_ch, in_ch, 3, 3],
                ParamKind::Weight,
                he_uniform(rng, fan_in, out_ch * fan_in),
            );
            let bias = params.push(format!("{prefix}.conv.bias"), vec![out_ch], ParamKind::Weight, vec![T::zero(); out_ch]);
            let gamma = params.push(format!("{prefix}.bn.gamma"), vec![out_ch], ParamKind::Weight, vec![T::one(); out_ch]);
            let beta = params.push(format!("{prefix}.bn.beta"), vec![out_ch], ParamKind::Weight, vec![T::zero(); out_ch]);
            let running_mean = params.push(
                format!("{prefix}.bn.running_mean"),
                vec![out_ch],
                ParamKind::Buffer,
                vec![T::zero(); out_ch],
            );
            let running_var = params.push(
                format!("{prefix}.bn.running_var"),
                vec![out_ch],
                ParamKind::Buffer,
                vec![T::one(); out_ch],
            );
            Unit {
                in_ch,
                out_ch,
                weight,
                bias,
                gamma,
                beta,
                running_mean,
                running_var,
            }
        };

        let mut ch = config.in_channels;
        for (level, &w) in widths.iter().enumerate() {
            units.push(add_unit(&mut params, rng, format!("enc{level}.0"), ch, w));
            units.push(add_unit(&mut params, rng, format!("enc{level}.1"), w, w));
            ch = w;
        }
        for level in (0..DEPTH).rev() {
            let w = widths[level];
            units.push(add_unit(&mut params, rng, format!("dec{level}.0"), ch + w, w));
            units.push(add_unit(&mut params, rng, format!("dec{level}.1"), w, w));
            ch = w;
        }
        let head_weight = params.push(
            "head.weight".into(),
            vec![config.num_classes, ch, 1, 1],
            ParamKind::Weight,
            he_uniform(rng, ch, config.num_classes * ch),
        );
        let head_bias = params.push(
            "head.bias".into(),
            vec![config.num_classes],
            ParamKind::Weight,
            vec![T::zero(); config.num_classes],
        );

        let net = Self {
            config: config.clone(),
            params,
            layout: Layout {
                units,
                head_weight,
                head_bias,
            },
        };
        net.check_symmetry();
        Ok(net)
    }

    /// Decoder inputs must line up with the encoder outputs they are
    /// concatenated with.
    fn check_symmetry(&self) {
        let widths = self.config.widths();
        let mut ch = widths[DEPTH - 1];
        for level in (0..DEPTH).rev() {
            let [a, b] = self.layout.decoder(level);
            let [_, skip] = self.layout.encoder(level);
            assert_eq!(a.in_ch, ch + skip.out_ch, "decoder {level} input width");
            assert_eq!(b.out_ch, widths[level]);
            ch = b.out_ch;
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Replaces the parameters, keeping the layout. Names and shapes must
    /// match.
    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        let m = 1 << DEPTH;
        if x.height() % m != 0 || x.width() % m != 0 || x.height() == 0 || x.width() == 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not a positive multiple of {m}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Spec-level forward. `Train` samples dropout from `rng` and folds the
    /// batch statistics into the BN running buffers; `Eval` uses the running
    /// buffers and ignores `rng`.
    pub fn forward<R: Rng + ?Sized>(&mut self, x: &ImageBatch<T>, mode: Mode, rng: &mut R) -> Result<ProbMap<T>> {
        match mode {
            Mode::Eval => self.predict(x),
            Mode::Train => {
                let mut stats = Vec::new();
                let probs = self.run(x, Some(rng), None, Some(&mut stats))?;
                self.fold_stats(stats.iter());
                Ok(probs)
            }
        }
    }

    /// Eval-mode forward; safe to call concurrently on a shared network.
    pub fn predict(&self, x: &ImageBatch<T>) -> Result<ProbMap<T>> {
        self.run::<rand_chacha::ChaCha8Rng>(x, None, None, None)
    }

    /// Train-mode forward without side effects on the running buffers.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &ImageBatch<T>, rng: &mut R) -> Result<ProbMap<T>> {
        let mut stats = Vec::new();
        self.run(x, Some(rng), None, Some(&mut stats))
    }

    /// Train-mode forward that records a [`Trace`] for [`Self::backward`].
    pub fn forward_traced<R: Rng + ?Sized>(&self, x: &ImageBatch<T>, rng: &mut R) -> Result<(ProbMap<T>, Trace<T>)> {
        let mut trace = Trace {
            units: Vec::with_capacity(4 * DEPTH),
            pool_arg: Vec::with_capacity(DEPTH),
            pool_input_shape: Vec::with_capacity(DEPTH),
            dropout_masks: Vec::with_capacity(DEPTH),
            up_channels: Vec::with_capacity(DEPTH),
            head_input: Tensor4::zeros([0, 0, 0, 0]),
            probs: Tensor4::zeros([0, 0, 0, 0]),
        };
        let probs = self.run(x, Some(rng), Some(&mut trace), None)?;
        Ok((probs, trace))
    }

    /// Folds the batch statistics of a traced forward into the running
    /// buffers (momentum 0.1, unbiased variance).
    pub fn commit_batch_stats(&mut self, trace: &Trace<T>) {
        self.fold_stats(trace.batch_stats());
    }

    fn fold_stats<'a>(&mut self, stats: impl Iterator<Item = &'a BatchStats<T>>) {
        let units = self.layout.units.clone();
        for (unit, s) in units.iter().zip(stats) {
            let mut rm = self.params.take_data(unit.running_mean);
            let mut rv = self.params.take_data(unit.running_var);
            layers::update_running(s, &mut rm, &mut rv);
            self.params.put_data(unit.running_mean, rm);
            self.params.put_data(unit.running_var, rv);
        }
    }

    fn unit_forward(
        &self,
        unit: &Unit,
        x: Tensor4<T>,
        train: bool,
        trace: Option<&mut Trace<T>>,
        stats: Option<&mut Vec<BatchStats<T>>>,
    ) -> Tensor4<T> {
        let p = &self.params;
        let mut y = layers::conv_forward(&x, p.data(unit.weight), p.data(unit.bias), unit.out_ch, 3);
        if train {
            let (batch, cache) = layers::bn_relu_train(&mut y, p.data(unit.gamma), p.data(unit.beta), trace.is_some());
            if let Some(tr) = trace {
                tr.units.push(UnitTrace {
                    input: x,
                    bn: cache.expect("cache requested"),
                    output: y.clone(),
                });
            }
            if let Some(st) = stats {
                st.push(batch);
            }
        } else {
            layers::bn_relu_eval(
                &mut y,
                p.data(unit.gamma),
                p.data(unit.beta),
                p.data(unit.running_mean),
                p.data(unit.running_var),
            );
        }
        y
    }

    fn run<R: Rng + ?Sized>(
        &self,
        x: &Tensor4<T>,
        mut rng: Option<&mut R>,
        mut trace: Option<&mut Trace<T>>,
        mut stats: Option<&mut Vec<BatchStats<T>>>,
    ) -> Result<ProbMap<T>> {
        self.check_input(x)?;
        let train = rng.is_some();
        let mut skips = Vec::with_capacity(DEPTH);
        let mut h = x.clone();
        for level in 0..DEPTH {
            let [u0, u1] = self.layout.encoder(level);
            let a = self.unit_forward(&u0, h, train, trace.as_deref_mut(), stats.as_deref_mut());
            let s = self.unit_forward(&u1, a, train, trace.as_deref_mut(), stats.as_deref_mut());
            let (mut pooled, arg) = layers::maxpool2(&s);
            let mask = match rng.as_deref_mut() {
                Some(r) if self.config.dropout_rate > 0.0 => {
                    Some(layers::dropout(&mut pooled, self.config.dropout_rate, r))
                }
                _ => None,
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.pool_arg.push(arg);
                tr.pool_input_shape.push(s.shape());
                tr.dropout_masks.push(mask);
            }
            skips.push(s);
            h = pooled;
        }
        for level in (0..DEPTH).rev() {
            let [u0, u1] = self.layout.decoder(level);
            let up = layers::upsample2(&h);
            if let Some(tr) = trace.as_deref_mut() {
                tr.up_channels.push(up.channels());
            }
            let joined = layers::concat(&up, &skips[level]);
            let a = self.unit_forward(&u0, joined, train, trace.as_deref_mut(), stats.as_deref_mut());
            h = self.unit_forward(&u1, a, train, trace.as_deref_mut(), stats.as_deref_mut());
        }
        let logits = layers::conv_forward(
            &h,
            self.params.data(self.layout.head_weight),
            self.params.data(self.layout.head_bias),
            self.config.num_classes,
            1,
        );
        let probs = layers::softmax_channels(&logits);
        if let Some(tr) = trace {
            tr.head_input = h;
            tr.probs = probs.clone();
        }
        Ok(ProbMap(probs))
    }

    fn unit_backward(&self, unit: &Unit, tr: &UnitTrace<T>, mut d: Tensor4<T>, grads: &mut Gradients<T>, need_dx: bool) -> Option<Tensor4<T>> {
        let p = &self.params;
        let mut dgamma = std::mem::take(&mut grads.slots[unit.gamma]);
        let mut dbeta = std::mem::take(&mut grads.slots[unit.beta]);
        layers::bn_relu_backward(&mut d, &tr.output, &tr.bn, p.data(unit.gamma), &mut dgamma, &mut dbeta);
        grads.slots[unit.gamma] = dgamma;
        grads.slots[unit.beta] = dbeta;
        let mut dw = std::mem::take(&mut grads.slots[unit.weight]);
        let mut db = std::mem::take(&mut grads.slots[unit.bias]);
        let dx = layers::conv_backward(&tr.input, &d, p.data(unit.weight), 3, &mut dw, &mut db, need_dx);
        grads.slots[unit.weight] = dw;
        grads.slots[unit.bias] = db;
        dx
    }

    /// Gradient of a scalar loss with respect to every weight, given the
    /// loss gradient with respect to the output probabilities.
    pub fn backward(&self, trace: &Trace<T>, dprobs: &Tensor4<T>) -> Result<Gradients<T>> {
        trace.probs.ensure_shape(dprobs.shape(), "probability gradient")?;
        let mut grads = Gradients::zeros_like(&self.params);
        let dlogits = layers::softmax_backward(&trace.probs, dprobs);
        let mut dw = std::mem::take(&mut grads.slots[self.layout.head_weight]);
        let mut db = std::mem::take(&mut grads.slots[self.layout.head_bias]);
        let mut dh = layers::conv_backward(
            &trace.head_input,
            &dlogits,
            self.params.data(self.layout.head_weight),
            1,
            &mut dw,
            &mut db,
            true,
        )
        .expect("dx requested");
        grads.slots[self.layout.head_weight] = dw;
        grads.slots[self.layout.head_bias] = db;

        let mut dskips: Vec<Option<Tensor4<T>>> = vec![None; DEPTH];
        for level in 0..DEPTH {
            let k = DEPTH - 1 - level;
            let [u0, u1] = self.layout.decoder(level);
            let t0 = &trace.units[2 * DEPTH + 2 * k];
            let t1 = &trace.units[2 * DEPTH + 2 * k + 1];
            let da = self.unit_backward(&u1, t1, dh, &mut grads, true).expect("dx");
            let dj = self.unit_backward(&u0, t0, da, &mut grads, true).expect("dx");
            let (dup, dskip) = layers::split(&dj, trace.up_channels[k]);
            dskips[level] = Some(dskip);
            dh = layers::upsample2_backward(&dup);
        }
        for level in (0..DEPTH).rev() {
            if let Some(mask) = &trace.dropout_masks[level] {
                for (g, m) in dh.as_mut_slice().iter_mut().zip(mask) {
                    *g *= *m;
                }
            }
            let mut ds = layers::maxpool2_backward(&dh, &trace.pool_arg[level], trace.pool_input_shape[level]);
            let skip = dskips[level].take().expect("decoder visited every level");
            for (a, b) in ds.as_mut_slice().iter_mut().zip(skip.as_slice()) {
                *a += *b;
            }
            let [u0, u1] = self.layout.encoder(level);
            let da = self
                .unit_backward(&u1, &trace.units[2 * level + 1], ds, &mut grads, true)
                .expect("dx");
            match self.unit_backward(&u0, &trace.units[2 * level], da, &mut grads, level > 0) {
                Some(d) => dh = d,
                None => break,
            }
        }
        Ok(grads)
    }
}

/// Moves every teacher value (weights and BN buffers) towards the student:
/// `teacher = alpha * teacher + (1 - alpha) * student`.
pub fn ema_update<T: Scalar>(teacher: &mut SegNetwork<T>, student: &SegNetwork<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("EMA decay {alpha} outside [0, 1]")));
    }
    teacher.params.check_compatible(&student.params)?;
    ema_params(&mut teacher.params, &student.params, T::lit(alpha));
    Ok(())
}

pub(crate) fn ema_params<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, alpha: T) {
    let rest = T::one() - alpha;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = alpha * *tv + rest * sv;
        }
    }
}
