//! The dual-branch highlighting network.

use std::rc::Rc;

use rand::Rng;
use vah_core::context::ContextFeatureMatrix;
use vah_core::seed::rng_for;
use vah_core::signal::StftPlan;
use vah_fabric::layers::{sinusoidal_pe, sinusoidal_pe_at, Conv, LayerNorm, Linear, MultiHeadAttention};
use vah_fabric::{ParamStore, Scalar, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::loss::mr_stft_loss_on_tape;

/// Added to the clip's standard deviation before normalising the waveform branch.
pub const WAVE_NORM_EPS: f64 = 1e-8;

/// Pre-norm transformer layer; cross-attention only when a memory is given.
#[derive(Debug, Clone)]
struct Block {
    ln_sa: LayerNorm,
    sa: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &ModelConfig,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.latent_dim;
        let ln_sa = LayerNorm::new(store, &format!("{name}.ln_sa"), c)?;
        let sa = MultiHeadAttention::new(store, &format!("{name}.sa"), c, cfg.heads, rng)?;
        let cross = if cross {
            Some((
                LayerNorm::new(store, &format!("{name}.ln_ca"), c)?,
                MultiHeadAttention::new(store, &format!("{name}.ca"), c, cfg.heads, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln_sa,
            sa,
            cross,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), c)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), c, cfg.ffn_dim, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_dim, c, rng)?,
        })
    }

    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        memory: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln_sa.forward(tape, store, x)?;
        let h = self.sa.forward(tape, store, h, h)?;
        let mut x = tape.add(x, h)?;
        if let (Some((ln, ca)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(tape, store, x)?;
            let h = ca.forward(tape, store, h, mem)?;
            x = tape.add(x, h)?;
        }
        let h = self.ln_ff.forward(tape, store, x)?;
        let h = self.ff1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }
}

#[derive(Debug, Clone)]
struct ContextEncoder {
    proj: Linear,
    layers: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct Network {
    spec_enc: Vec<Conv>,
    wave_enc: Vec<Conv>,
    halve: Conv,
    contexts: Vec<ContextEncoder>,
    latent: Vec<Block>,
    latent_norm: LayerNorm,
    gate: Linear,
    double: Conv,
    spec_dec: Vec<Conv>,
    wave_dec: Vec<Conv>,
}

/// Tape handles of the intermediate results of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    /// Waveform prediction, same length as the input.
    pub output: Var,
    /// `f_a` as `[L, C_a]`.
    pub latent: Var,
    /// `f_a` after the conditioned residual update, `[L, C_a]`.
    pub latent_hat: Var,
    /// Nonnegative ratio mask over the cropped bins, `[F, T']`.
    pub mask: Var,
    /// Waveform-head output after rescaling, padded length.
    pub wave: Var,
    /// Masked-spectrogram resynthesis, padded length.
    pub spec_wave: Var,
}

/// Parameters plus the fixed transforms of one configured network.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    net: Network,
    plan: StftPlan<S>,
    loss_plans: Vec<StftPlan<S>>,
}

fn ladder<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    channels: &[usize],
    strides: &[usize],
    rng: &mut impl Rng,
) -> Result<(Vec<Conv>, Vec<Conv>)> {
    let mut enc = Vec::new();
    let mut dec = Vec::new();
    for (j, (&c, &s)) in channels.iter().zip(strides).enumerate() {
        let c_in = if j == 0 { 1 } else { channels[j - 1] };
        enc.push(Conv::down(store, &format!("{name}_enc.{j}"), c_in, c, s, rng)?);
    }
    for (j, (&c, &s)) in channels.iter().zip(strides).enumerate() {
        let c_in = if j == 0 { 1 } else { channels[j - 1] };
        dec.push(Conv::up(store, &format!("{name}_dec.{j}"), c, c_in, s, rng)?);
    }
    Ok((enc, dec))
}

/// Builds a model with seeded initialisation.
pub fn build_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = rng_for(seed, "init");
    let mut store = ParamStore::new();
    let (spec_enc, spec_dec) = ladder(&mut store, "spec", &config.channels, &config.freq_strides, &mut rng)?;
    let (wave_enc, wave_dec) = ladder(&mut store, "wave", &config.channels, &config.wave_strides, &mut rng)?;
    let top = *config.channels.last().expect("validated ladder");
    let c = config.latent_dim;
    let halve = Conv::down(&mut store, "halve", top, c, 2, &mut rng)?;
    let mut contexts = Vec::new();
    for ctx in &config.contexts {
        let name = format!("ctx_{}", ctx.stream.label());
        let proj = Linear::new(&mut store, &format!("{name}.proj"), ctx.dim, c, &mut rng)?;
        let layers = (0..config.context_encoder_layers)
            .map(|k| Block::new(&mut store, &format!("{name}.layer{k}"), config, false, &mut rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut store, &format!("{name}.norm"), c)?;
        contexts.push(ContextEncoder { proj, layers, norm });
    }
    let latent = (0..config.decoder_layers)
        .map(|k| Block::new(&mut store, &format!("latent.layer{k}"), config, config.uses_context(), &mut rng))
        .collect::<Result<_>>()?;
    let latent_norm = LayerNorm::new(&mut store, "latent.norm", c)?;
    let gate = Linear::zeroed(&mut store, "latent.gate", c, c)?;
    let double = Conv::up(&mut store, "double", c, top, 2, &mut rng)?;

    // Heads start at a unit mask and a silent waveform branch.
    let mask_head = &spec_dec[0];
    store.value_mut(mask_head.w).data_mut().iter_mut().for_each(|v| *v = S::zero());
    let unit = S::lit((std::f64::consts::E - 1.0).ln());
    store.value_mut(mask_head.b).data_mut().iter_mut().for_each(|v| *v = unit);
    let wave_head = &wave_dec[0];
    store.value_mut(wave_head.w).data_mut().iter_mut().for_each(|v| *v = S::zero());

    let plan = StftPlan::new(config.window, config.hop)?;
    let loss_plans = config.loss_windows.iter().map(|&w| StftPlan::new(w, w / 4)).collect::<vah_core::Result<_>>()?;
    Ok(Model {
        config: config.clone(),
        store,
        net: Network { spec_enc, wave_enc, halve, contexts, latent, latent_norm, gate, double, spec_dec, wave_dec },
        plan,
        loss_plans,
    })
}

fn std_dev<S: Scalar>(x: &[S]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / n;
    (x.iter().map(|v| (v.to_f64().unwrap_or(0.0) - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl<S: Scalar> Model<S> {
    pub fn loss_plans(&self) -> &[StftPlan<S>] {
        &self.loss_plans
    }

    /// Length the input is zero-padded to before framing.
    pub fn padded_len(&self, len: usize) -> usize {
        let step = self.config.latent_stride();
        len.div_ceil(step).max(1) * step
    }

    fn check_contexts(&self, contexts: &[&ContextFeatureMatrix]) -> Result<()> {
        if !self.config.uses_context() {
            return Ok(());
        }
        if contexts.len() != self.config.contexts.len() {
            return Err(Error::Input(format!(
                "model expects {} context streams, got {}",
                self.config.contexts.len(),
                contexts.len()
            )));
        }
        for (spec, ctx) in self.config.contexts.iter().zip(contexts) {
            if ctx.dim() != spec.dim {
                return Err(Error::Input(format!(
                    "{:?} context has dimension {}, model expects {}",
                    spec.stream,
                    ctx.dim(),
                    spec.dim
                )));
            }
        }
        Ok(())
    }

    /// Records the full forward pass for `input` on `tape`.
    pub fn trace(&self, tape: &mut Tape<S>, input: &[S], contexts: &[&ContextFeatureMatrix]) -> Result<Trace> {
        self.check_contexts(contexts)?;
        if input.is_empty() {
            return Err(Error::Input("input audio is empty".into()));
        }
        let cfg = &self.config;
        let store = &self.store;
        let net = &self.net;
        let len = input.len();
        let padded = self.padded_len(len);
        let mut x = input.to_vec();
        x.resize(padded, S::zero());
        let frames = padded / cfg.hop;
        let bins = cfg.cropped_bins();

        tape.enter("spectrogram");
        let spec = Rc::new(self.plan.forward(&x));
        let mag: Vec<S> = spec.iter().map(|c| c.norm()).collect();
        let full = tape.constant(Tensor::new(&[bins + 1, frames + 1], mag)?);
        let cropped = tape.slice(full, 0, 0, bins)?;
        let cropped = tape.slice(cropped, 1, 0, frames)?;
        let mut h = tape.reshape(cropped, &[1, bins, frames])?;
        let mut spec_skips = Vec::new();
        for conv in &net.spec_enc {
            h = conv.forward(tape, store, h)?;
            h = tape.gelu(h);
            spec_skips.push(h);
        }
        let e_spec = tape.reshape(h, &[cfg.channels[cfg.channels.len() - 1], frames, 1])?;
        tape.exit();

        tape.enter("waveform");
        let sigma = std_dev(input);
        let inv = S::lit(1.0 / (sigma + WAVE_NORM_EPS));
        let mut h = tape.constant(Tensor::new(&[1, padded, 1], x.iter().map(|v| *v * inv).collect())?);
        let mut wave_skips = Vec::new();
        for conv in &net.wave_enc {
            h = conv.forward(tape, store, h)?;
            h = tape.gelu(h);
            wave_skips.push(h);
        }
        tape.exit();

        tape.enter("shared");
        let sum = tape.add(e_spec, h)?;
        let f = net.halve.forward(tape, store, sum)?;
        let f = tape.gelu(f);
        let steps = frames / 2;
        let f = tape.reshape(f, &[cfg.latent_dim, steps])?;
        let latent = tape.transpose(f)?;
        tape.exit();

        let memory = if cfg.uses_context() {
            let mut encoded = Vec::new();
            for (enc, ctx) in net.contexts.iter().zip(contexts) {
                tape.enter("context");
                encoded.push(self.encode_context(tape, enc, ctx)?);
                tape.exit();
            }
            Some(if encoded.len() == 1 { encoded[0] } else { tape.concat(&encoded, 0)? })
        } else {
            None
        };

        tape.enter("latent");
        let pe = tape.constant(sinusoidal_pe(steps, cfg.latent_dim));
        let mut z = tape.add(latent, pe)?;
        for block in &net.latent {
            z = block.forward(tape, store, z, memory)?;
        }
        let z = net.latent_norm.forward(tape, store, z)?;
        let z = net.gate.forward(tape, store, z)?;
        let latent_hat = tape.add(latent, z)?;
        tape.exit();

        tape.enter("decoder");
        let d = tape.transpose(latent_hat)?;
        let d = tape.reshape(d, &[cfg.latent_dim, steps, 1])?;
        let d = net.double.forward(tape, store, d)?;
        let shared = tape.gelu(d);
        let top = cfg.channels[cfg.channels.len() - 1];

        let mut s = tape.reshape(shared, &[top, 1, frames])?;
        for j in (0..net.spec_dec.len()).rev() {
            s = tape.add(s, spec_skips[j])?;
            s = net.spec_dec[j].forward(tape, store, s)?;
            if j > 0 {
                s = tape.gelu(s);
            }
        }
        let mask = tape.softplus(s);
        let mask = tape.reshape(mask, &[bins, frames])?;
        let nyquist = tape.constant(Tensor::zeros(&[1, frames]));
        let m = tape.concat(&[mask, nyquist], 0)?;
        let last = tape.slice(m, 1, frames - 1, 1)?;
        let m = tape.concat(&[m, last], 1)?;
        let spec_wave = tape.masked_istft(m, spec, &self.plan, padded)?;

        let mut w = shared;
        for j in (0..net.wave_dec.len()).rev() {
            w = tape.add(w, wave_skips[j])?;
            w = net.wave_dec[j].forward(tape, store, w)?;
            if j > 0 {
                w = tape.gelu(w);
            }
        }
        let w = tape.reshape(w, &[padded])?;
        let wave = tape.scale(w, S::lit(sigma));
        let out = tape.add(spec_wave, wave)?;
        let output = if padded == len {
            out
        } else {
            let row = tape.reshape(out, &[1, padded])?;
            let row = tape.slice(row, 1, 0, len)?;
            tape.reshape(row, &[len])?
        };
        tape.exit();
        Ok(Trace { output, latent, latent_hat, mask, wave, spec_wave })
    }

    fn encode_context(&self, tape: &mut Tape<S>, enc: &ContextEncoder, ctx: &ContextFeatureMatrix) -> Result<Var> {
        let cfg = &self.config;
        let rows = ctx.frames();
        let data = ctx.data().iter().map(|v| S::lit(f64::from(*v))).collect();
        let x = tape.constant(Tensor::new(&[rows, ctx.dim()], data)?);
        let mut h = enc.proj.forward(tape, &self.store, x)?;
        let per_second = f64::from(cfg.sample_rate) / cfg.latent_stride() as f64;
        let positions: Vec<f64> = (0..rows).map(|t| (t as f64 + 0.5) * per_second).collect();
        let pe = tape.constant(sinusoidal_pe_at(&positions, cfg.latent_dim));
        for block in &enc.layers {
            h = tape.add(h, pe)?;
            h = block.forward(tape, &self.store, h, None)?;
        }
        Ok(enc.norm.forward(tape, &self.store, h)?)
    }

    /// Predicted waveform for `input`.
    pub fn forward(&self, input: &[S], contexts: &[&ContextFeatureMatrix]) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, input, contexts)?;
        Ok(tape.value(trace.output).data().to_vec())
    }

    /// Forward pass plus multi-resolution STFT loss against `target`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<S>,
        input: &[S],
        target: &[S],
        contexts: &[&ContextFeatureMatrix],
    ) -> Result<Var> {
        if input.len() != target.len() {
            return Err(Error::Input(format!("input has {} samples, target {}", input.len(), target.len())));
        }
        let trace = self.trace(tape, input, contexts)?;
        tape.enter("loss");
        let loss = mr_stft_loss_on_tape(tape, trace.output, target, &self.loss_plans)?;
        tape.exit();
        Ok(loss)
    }

    /// Same architecture and values in another precision.
    pub fn cast<T: Scalar>(&self) -> Result<Model<T>> {
        Ok(Model {
            config: self.config.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
            plan: StftPlan::new(self.config.window, self.config.hop)?,
            loss_plans: self
                .config
                .loss_windows
                .iter()
                .map(|&w| StftPlan::new(w, w / 4))
                .collect::<vah_core::Result<_>>()?,
        })
    }
}
