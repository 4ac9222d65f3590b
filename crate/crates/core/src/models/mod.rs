//! The two generative models: a single-level VAE with a flow prior, and the
//! two-level srVAE that first models a deterministically downscaled image
//! `y` through latent `u`, then super-resolves `x` from `(y, z)`.
//!
//! Both expose single-sample ELBO estimates decomposed into named terms,
//! gradient evaluation for training, and the sampling pipelines.

mod network;

pub use network::{LayerParams, LayerVars, NetworkParams};

use crate::autodiff::{Tape, Var};
use crate::distributions::{
    dlogistic_log_prob_t, dlogistic_sample, gaussian_log_prob_t, gaussian_sample,
    gaussian_sample_t, DLogisticMixtureParams, DiagGaussianParams, GaussianVars, MixtureVars,
    LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::downscale::{degenerate_log_mass, downscale, DiscreteImage};
use crate::error::{Error, Result};
use crate::flow::{FlowPrior, FlowVars};
use crate::numerics::{DenseArray, RngStream};
use crate::params::{join, Binder, HasParams};

/// Shared shape/size configuration for both models.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Dimension of `u` (the compressed-image latent).
    pub latent_k: usize,
    /// Dimension of `z` (the detail latent; the VAE's only latent).
    pub latent_m: usize,
    pub n_mix: usize,
    pub flow_depth: usize,
    pub hidden_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Smallest config that exercises every code path; used by the fast
    /// oracle suites.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 1,
            latent_k: 8,
            latent_m: 8,
            n_mix: 1,
            flow_depth: 2,
            hidden_width: 8,
            seed: 0,
        }
    }

    /// Desk-scale preset for 16x16 RGB toy images.
    pub fn toy() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            latent_k: 32,
            latent_m: 32,
            n_mix: 5,
            flow_depth: 8,
            hidden_width: 32,
            seed: 0,
        }
    }

    /// CIFAR-10-shaped preset (latents 16x8x8 = 1024); retained for
    /// completeness, far beyond desk-scale training budgets.
    pub fn cifar10() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            latent_k: 1024,
            latent_m: 1024,
            n_mix: 5,
            flow_depth: 8,
            hidden_width: 64,
            seed: 0,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Mixture-head plane count for an image with this channel count.
    fn mixture_planes(&self) -> usize {
        3 * self.n_mix * self.channels
    }

    /// Channels of the spatial plane `z` is reshaped into for the
    /// super-resolution decoder.
    fn z_plane_channels(&self) -> Result<usize> {
        let cells = (self.height / 4) * (self.width / 4);
        if self.latent_m % cells != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent_m {} must divide into the {}x{} decoder grid",
                self.latent_m,
                self.height / 4,
                self.width / 4
            )));
        }
        Ok(self.latent_m / cells)
    }

    fn validate_common(&self) -> Result<()> {
        if self.latent_k == 0
            || self.latent_m == 0
            || self.n_mix == 0
            || self.hidden_width == 0
            || self.channels == 0
        {
            return Err(Error::InvalidArgument(
                "latent dims, n_mix, hidden width and channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn validate_vae(&self) -> Result<()> {
        self.validate_common()?;
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument(format!(
                "VAE image extents must be >= 8 and divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn validate_srvae(&self) -> Result<()> {
        self.validate_common()?;
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "srVAE image extents must be even, got {}x{}",
                self.height, self.width
            )));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument(format!(
                "srVAE image extents must be >= 8 and divisible by 8 (the compressed image feeds 4x-grid networks), got {}x{}",
                self.height, self.width
            )));
        }
        self.z_plane_channels()?;
        Ok(())
    }
}

/// Per-example ELBO decomposition in nats: reconstruction terms are negative
/// log-likelihood losses, KL terms divergences; the training loss is their
/// sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub re_x: f64,
    pub re_y: f64,
    pub kl_z: f64,
    pub kl_u: f64,
}

impl ElboTerms {
    pub fn elbo_loss(&self) -> f64 {
        self.re_x + self.re_y + self.kl_z + self.kl_u
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("re_x", self.re_x),
            ("re_y", self.re_y),
            ("kl_z", self.kl_z),
            ("kl_u", self.kl_u),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("ELBO term {name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn accumulate(&mut self, other: &ElboTerms) {
        self.re_x += other.re_x;
        self.re_y += other.re_y;
        self.kl_z += other.kl_z;
        self.kl_u += other.kl_u;
    }

    pub fn scaled(&self, factor: f64) -> ElboTerms {
        ElboTerms {
            re_x: self.re_x * factor,
            re_y: self.re_y * factor,
            kl_z: self.kl_z * factor,
            kl_u: self.kl_u * factor,
        }
    }
}

/// Reparameterization noise for one ELBO evaluation. Freezing it makes the
/// estimate a deterministic, differentiable function of the parameters.
#[derive(Clone, Debug)]
pub struct NoiseDraws {
    pub eps_u: Option<DenseArray>,
    pub eps_z: DenseArray,
}

impl NoiseDraws {
    /// Draw order is fixed: `eps_u` first (srVAE only), then `eps_z`.
    pub fn draw_srvae(config: &ModelConfig, rng: &mut RngStream) -> Self {
        let eps_u = rng.normal_array(&[config.latent_k]);
        let eps_z = rng.normal_array(&[config.latent_m]);
        Self {
            eps_u: Some(eps_u),
            eps_z,
        }
    }

    pub fn draw_vae(config: &ModelConfig, rng: &mut RngStream) -> Self {
        Self {
            eps_u: None,
            eps_z: rng.normal_array(&[config.latent_m]),
        }
    }
}

/// One sample from the generation pipeline; srVAE also yields the
/// intermediate compressed image.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub compressed: Option<DiscreteImage>,
    pub image: DiscreteImage,
}

// ── heads ────────────────────────────────────────────────────────────

fn gaussian_head(tape: &Tape, out: Var, dim: usize) -> GaussianVars {
    GaussianVars {
        mean: tape.slice_last(out, 0, dim),
        log_var: tape.clamp(tape.slice_last(out, dim, 2 * dim), LOG_VAR_MIN, LOG_VAR_MAX),
    }
}

/// Split an `[h, w, 3 * n_mix * c]` head into per-scalar mixture parameters
/// of shape `[h, w, c, n_mix]`: weights, means, then log-scales.
fn mixture_head(tape: &Tape, out: Var, h: usize, w: usize, c: usize, n_mix: usize) -> MixtureVars {
    let group = n_mix * c;
    let shape = [h, w, c, n_mix];
    MixtureVars {
        logit_weights: tape.reshape(tape.slice_last(out, 0, group), &shape),
        means: tape.reshape(tape.slice_last(out, group, 2 * group), &shape),
        log_scales: tape.max_scalar(
            tape.reshape(tape.slice_last(out, 2 * group, 3 * group), &shape),
            crate::distributions::LOG_SCALE_MIN,
        ),
    }
}

fn gaussian_params_from(tape: &Tape, g: GaussianVars) -> DiagGaussianParams {
    DiagGaussianParams::new(tape.value(g.mean), tape.value(g.log_var))
        .expect("head produces matched shapes")
}

fn mixture_params_from(tape: &Tape, m: &MixtureVars) -> DLogisticMixtureParams {
    DLogisticMixtureParams::new(
        tape.value(m.logit_weights),
        tape.value(m.means),
        tape.value(m.log_scales),
    )
    .expect("head produces matched shapes")
}

// ── VAE ──────────────────────────────────────────────────────────────

/// Single-level baseline: encoder `q(z|x)`, decoder `p(x|z)` and a flow
/// prior over `z`.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: ModelConfig,
    pub encoder: NetworkParams,
    pub decoder: NetworkParams,
    pub prior: FlowPrior,
}

pub struct VaeVars {
    encoder: Vec<LayerVars>,
    decoder: Vec<LayerVars>,
    prior: FlowVars,
}

pub fn build_vae(config: &ModelConfig) -> Result<VaeModel> {
    config.validate_vae()?;
    let root = RngStream::new(config.seed);
    let (h, w, c) = (config.height, config.width, config.channels);
    Ok(VaeModel {
        encoder: NetworkParams::conv_encoder(
            h,
            w,
            c,
            config.hidden_width,
            2 * config.latent_m,
            &mut root.child("encoder"),
        )?,
        decoder: NetworkParams::conv_decoder(
            config.latent_m,
            h,
            w,
            config.mixture_planes(),
            config.hidden_width,
            &mut root.child("decoder"),
        )?,
        prior: FlowPrior::new(config.latent_m, config.flow_depth, &mut root.child("prior"))?,
        config: config.clone(),
    })
}

pub(crate) struct VaeGraph {
    pub lp_x: Var,
    pub lq_z: Var,
    pub lp_z_flow: Var,
}

impl VaeModel {
    pub fn bind(&self, binder: &mut Binder) -> VaeVars {
        VaeVars {
            encoder: self.encoder.bind(binder),
            decoder: self.decoder.bind(binder),
            prior: self.prior.bind(binder),
        }
    }

    fn check_input(&self, x: &DiscreteImage) -> Result<()> {
        if x.height != self.config.height
            || x.width != self.config.width
            || x.channels != self.config.channels
        {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{}x{} vs configured {}x{}x{}",
                x.height,
                x.width,
                x.channels,
                self.config.height,
                self.config.width,
                self.config.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn graph(
        &self,
        tape: &Tape,
        vars: &VaeVars,
        x: &DiscreteImage,
        noise: &NoiseDraws,
    ) -> Result<VaeGraph> {
        self.check_input(x)?;
        let cfg = &self.config;
        if noise.eps_z.shape() != [cfg.latent_m] {
            return Err(Error::ShapeMismatch(format!(
                "eps_z shape {:?}, expected [{}]",
                noise.eps_z.shape(),
                cfg.latent_m
            )));
        }
        let x_in = tape.constant(x.to_unit_scale());
        let q_z = gaussian_head(
            tape,
            self.encoder.forward_t(tape, &vars.encoder, x_in),
            cfg.latent_m,
        );
        let z = gaussian_sample_t(tape, q_z, tape.constant(noise.eps_z.clone()));
        let mix = mixture_head(
            tape,
            self.decoder.forward_t(tape, &vars.decoder, z),
            cfg.height,
            cfg.width,
            cfg.channels,
            cfg.n_mix,
        );
        Ok(VaeGraph {
            lp_x: dlogistic_log_prob_t(tape, &mix, x)?,
            lq_z: gaussian_log_prob_t(tape, q_z, z),
            lp_z_flow: self.prior.log_prob_t(tape, &vars.prior, z),
        })
    }

    fn terms_from_graph(&self, tape: &Tape, g: &VaeGraph) -> Result<ElboTerms> {
        let terms = ElboTerms {
            re_x: -tape.item(g.lp_x),
            re_y: 0.0,
            kl_z: tape.item(g.lq_z) - tape.item(g.lp_z_flow),
            kl_u: 0.0,
        };
        terms.check_finite()?;
        Ok(terms)
    }

    /// Single-sample ELBO estimate; the KL slot holds the flow-prior
    /// log-ratio `log q(z|x) - log p(z)`.
    pub fn elbo_with_noise(&self, x: &DiscreteImage, noise: &NoiseDraws) -> Result<ElboTerms> {
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.bind(&mut binder);
        let graph = self.graph(&tape, &vars, x, noise)?;
        self.terms_from_graph(&tape, &graph)
    }

    pub fn elbo(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<ElboTerms> {
        self.elbo_with_noise(x, &NoiseDraws::draw_vae(&self.config, rng))
    }

    /// ELBO terms plus parameter gradients of `re_x + kl_scale * kl`.
    pub fn elbo_grads_with_noise(
        &self,
        x: &DiscreteImage,
        noise: &NoiseDraws,
        kl_scale: f64,
    ) -> Result<(ElboTerms, Vec<DenseArray>)> {
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = self.bind(&mut binder);
        let graph = self.graph(&tape, &vars, x, noise)?;
        let terms = self.terms_from_graph(&tape, &graph)?;
        let kl = tape.sub(graph.lq_z, graph.lp_z_flow);
        let loss = tape.add(tape.neg(graph.lp_x), tape.mul_scalar(kl, kl_scale));
        let grads = collect_leaf_grads(&tape, loss, binder)?;
        Ok((terms, grads))
    }

    /// Single-draw importance weight `log p(x, z) - log q(z|x)`.
    pub fn log_weight(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<f64> {
        let noise = NoiseDraws::draw_vae(&self.config, rng);
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.bind(&mut binder);
        let g = self.graph(&tape, &vars, x, &noise)?;
        let w = tape.item(g.lp_x) + tape.item(g.lp_z_flow) - tape.item(g.lq_z);
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("importance weight {w}")));
        }
        Ok(w)
    }

    /// Likelihood parameters `p(x|z)` for one latent.
    pub fn decode(&self, z: &DenseArray) -> DLogisticMixtureParams {
        let cfg = &self.config;
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.decoder.bind(&mut binder);
        let out = self
            .decoder
            .forward_t(&tape, &vars, tape.constant(z.clone()));
        let mix = mixture_head(&tape, out, cfg.height, cfg.width, cfg.channels, cfg.n_mix);
        mixture_params_from(&tape, &mix)
    }

    /// Variational posterior `q(z|x)`.
    pub fn posterior(&self, x: &DiscreteImage) -> DiagGaussianParams {
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.encoder.bind(&mut binder);
        let out = self
            .encoder
            .forward_t(&tape, &vars, tape.constant(x.to_unit_scale()));
        gaussian_params_from(&tape, gaussian_head(&tape, out, self.config.latent_m))
    }

    /// `z ~ p(z) -> x ~ p(x|z)`.
    pub fn generate(&self, rng: &mut RngStream, n: usize) -> Result<Vec<GeneratedSample>> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z = self.prior.sample(rng);
            let image = dlogistic_sample(
                &self.decode(&z),
                cfg.height,
                cfg.width,
                cfg.channels,
                rng,
            )?;
            out.push(GeneratedSample {
                compressed: None,
                image,
            });
        }
        Ok(out)
    }

    /// `z ~ q(z|x) -> x ~ p(x|z)`.
    pub fn reconstruct(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<DiscreteImage> {
        self.check_input(x)?;
        let cfg = &self.config;
        let q = self.posterior(x);
        let z = gaussian_sample(&q, &rng.normal_array(&[cfg.latent_m]))?;
        dlogistic_sample(
            &self.decode(&z),
            cfg.height,
            cfg.width,
            cfg.channels,
            rng,
        )
    }
}

impl HasParams for VaeModel {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray)) {
        self.encoder.for_each_param(&join(prefix, "encoder"), f);
        self.decoder.for_each_param(&join(prefix, "decoder"), f);
        self.prior.for_each_param(&join(prefix, "prior"), f);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        self.encoder.for_each_param_mut(&join(prefix, "encoder"), f);
        self.decoder.for_each_param_mut(&join(prefix, "decoder"), f);
        self.prior.for_each_param_mut(&join(prefix, "prior"), f);
    }
}

// ── srVAE ────────────────────────────────────────────────────────────

/// Two-level model over `(x, y = downscale(x))` with latents `u` (global
/// structure, flow prior) and `z` (detail).
#[derive(Clone, Debug)]
pub struct SrvaeModel {
    pub config: ModelConfig,
    /// `q(u|y)`.
    pub enc_u: NetworkParams,
    /// `q(z|x)` (the compressed image adds nothing beyond `x`, so `z` is
    /// inferred from `x` alone).
    pub enc_z: NetworkParams,
    /// Flow prior `p(u)`.
    pub prior_u: FlowPrior,
    /// `p(y|u)` mixture head.
    pub dec_y: NetworkParams,
    /// `p(z|y,u)` conditional prior; consumes `y` with `u` broadcast over
    /// its spatial grid.
    pub cond_z: NetworkParams,
    /// `p(x|z,y)` mixture head; consumes nearest-upsampled `y` concatenated
    /// with `z` reshaped to a quarter-resolution grid and bilinearly
    /// upsampled.
    pub dec_x: NetworkParams,
}

pub struct SrvaeVars {
    enc_u: Vec<LayerVars>,
    enc_z: Vec<LayerVars>,
    prior_u: FlowVars,
    dec_y: Vec<LayerVars>,
    cond_z: Vec<LayerVars>,
    dec_x: Vec<LayerVars>,
}

pub fn build_srvae(config: &ModelConfig) -> Result<SrvaeModel> {
    config.validate_srvae()?;
    let root = RngStream::new(config.seed);
    let (h, w, c) = (config.height, config.width, config.channels);
    let (hy, wy) = (h / 2, w / 2);
    let hid = config.hidden_width;
    Ok(SrvaeModel {
        enc_u: NetworkParams::conv_encoder(
            hy,
            wy,
            c,
            hid,
            2 * config.latent_k,
            &mut root.child("enc_u"),
        )?,
        enc_z: NetworkParams::conv_encoder(
            h,
            w,
            c,
            hid,
            2 * config.latent_m,
            &mut root.child("enc_z"),
        )?,
        prior_u: FlowPrior::new(config.latent_k, config.flow_depth, &mut root.child("prior_u"))?,
        dec_y: NetworkParams::conv_decoder(
            config.latent_k,
            hy,
            wy,
            config.mixture_planes(),
            hid,
            &mut root.child("dec_y"),
        )?,
        cond_z: NetworkParams::conv_encoder(
            hy,
            wy,
            c + config.latent_k,
            hid,
            2 * config.latent_m,
            &mut root.child("cond_z"),
        )?,
        dec_x: NetworkParams::conv_tower(
            h,
            w,
            c + config.z_plane_channels()?,
            config.mixture_planes(),
            hid,
            &mut root.child("dec_x"),
        ),
        config: config.clone(),
    })
}

/// All per-sample log quantities of one srVAE evaluation; every ELBO
/// variant, the identity check and the importance weights assemble from
/// these.
pub(crate) struct SrvaeGraph {
    pub lp_x: Var,
    pub lp_y: Var,
    pub lp_z_prior: Var,
    pub lp_u_flow: Var,
    pub lq_z: Var,
    pub lq_u: Var,
    pub kl_z_analytic: Var,
}

impl SrvaeModel {
    pub fn bind(&self, binder: &mut Binder) -> SrvaeVars {
        SrvaeVars {
            enc_u: self.enc_u.bind(binder),
            enc_z: self.enc_z.bind(binder),
            prior_u: self.prior_u.bind(binder),
            dec_y: self.dec_y.bind(binder),
            cond_z: self.cond_z.bind(binder),
            dec_x: self.dec_x.bind(binder),
        }
    }

    fn check_input(&self, x: &DiscreteImage) -> Result<()> {
        if x.height != self.config.height
            || x.width != self.config.width
            || x.channels != self.config.channels
        {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{}x{} vs configured {}x{}x{}",
                x.height,
                x.width,
                x.channels,
                self.config.height,
                self.config.width,
                self.config.channels
            )));
        }
        Ok(())
    }

    fn check_compressed(&self, y: &DiscreteImage) -> Result<()> {
        if y.height != self.config.height / 2
            || y.width != self.config.width / 2
            || y.channels != self.config.channels
        {
            return Err(Error::ShapeMismatch(format!(
                "compressed input {}x{}x{} vs expected {}x{}x{}",
                y.height,
                y.width,
                y.channels,
                self.config.height / 2,
                self.config.width / 2,
                self.config.channels
            )));
        }
        Ok(())
    }

    /// `p(z|y,u)` input: `u` broadcast over the compressed image's spatial
    /// grid, concatenated channelwise.
    fn cond_z_input(&self, tape: &Tape, y_in: Var, u: Var) -> Var {
        let (hy, wy) = (self.config.height / 2, self.config.width / 2);
        let u_plane = tape.broadcast_spatial(u, hy, wy);
        tape.concat_last(&[y_in, u_plane])
    }

    /// `p(x|z,y)` input: nearest 2x upsample of `y` concatenated with `z`
    /// reshaped to the quarter-resolution grid and bilinearly upsampled.
    fn dec_x_input(&self, tape: &Tape, y_in: Var, z: Var) -> Var {
        let cfg = &self.config;
        let (gh, gw) = (cfg.height / 4, cfg.width / 4);
        let zc = cfg.latent_m / (gh * gw);
        let y_up = tape.upsample_nearest2x(y_in);
        let z_grid = tape.reshape(z, &[gh, gw, zc]);
        let z_plane = tape.upsample_bilinear(z_grid, cfg.height, cfg.width);
        tape.concat_last(&[y_up, z_plane])
    }

    pub(crate) fn graph(
        &self,
        tape: &Tape,
        vars: &SrvaeVars,
        x: &DiscreteImage,
        noise: &NoiseDraws,
    ) -> Result<SrvaeGraph> {
        self.check_input(x)?;
        let cfg = &self.config;
        let eps_u = noise.eps_u.as_ref().ok_or_else(|| {
            Error::InvalidArgument("srVAE ELBO needs an eps_u noise draw".into())
        })?;
        if eps_u.shape() != [cfg.latent_k] || noise.eps_z.shape() != [cfg.latent_m] {
            return Err(Error::ShapeMismatch(format!(
                "noise shapes eps_u {:?} / eps_z {:?} vs latents {} / {}",
                eps_u.shape(),
                noise.eps_z.shape(),
                cfg.latent_k,
                cfg.latent_m
            )));
        }
        let y = downscale(x)?;
        let x_in = tape.constant(x.to_unit_scale());
        let y_in = tape.constant(y.to_unit_scale());

        let q_u = gaussian_head(
            tape,
            self.enc_u.forward_t(tape, &vars.enc_u, y_in),
            cfg.latent_k,
        );
        let u = gaussian_sample_t(tape, q_u, tape.constant(eps_u.clone()));

        let q_z = gaussian_head(
            tape,
            self.enc_z.forward_t(tape, &vars.enc_z, x_in),
            cfg.latent_m,
        );
        let z = gaussian_sample_t(tape, q_z, tape.constant(noise.eps_z.clone()));

        let mix_y = mixture_head(
            tape,
            self.dec_y.forward_t(tape, &vars.dec_y, u),
            cfg.height / 2,
            cfg.width / 2,
            cfg.channels,
            cfg.n_mix,
        );

        let p_z = gaussian_head(
            tape,
            self.cond_z
                .forward_t(tape, &vars.cond_z, self.cond_z_input(tape, y_in, u)),
            cfg.latent_m,
        );

        let mix_x = mixture_head(
            tape,
            self.dec_x
                .forward_t(tape, &vars.dec_x, self.dec_x_input(tape, y_in, z)),
            cfg.height,
            cfg.width,
            cfg.channels,
            cfg.n_mix,
        );

        Ok(SrvaeGraph {
            lp_x: dlogistic_log_prob_t(tape, &mix_x, x)?,
            lp_y: dlogistic_log_prob_t(tape, &mix_y, &y)?,
            lp_z_prior: gaussian_log_prob_t(tape, p_z, z),
            lp_u_flow: self.prior_u.log_prob_t(tape, &vars.prior_u, u),
            lq_z: gaussian_log_prob_t(tape, q_z, z),
            lq_u: gaussian_log_prob_t(tape, q_u, u),
            kl_z_analytic: crate::distributions::gaussian_kl_t(tape, q_z, p_z),
        })
    }

    fn terms_from_graph(&self, tape: &Tape, g: &SrvaeGraph) -> Result<ElboTerms> {
        let terms = ElboTerms {
            re_x: -tape.item(g.lp_x),
            re_y: -tape.item(g.lp_y),
            kl_z: tape.item(g.kl_z_analytic),
            kl_u: tape.item(g.lq_u) - tape.item(g.lp_u_flow),
        };
        terms.check_finite()?;
        Ok(terms)
    }

    /// Single-sample ELBO estimate: analytic Gaussian KL for `z` given the
    /// sampled `u`, single-sample log-ratio for the flow-prior KL of `u`.
    pub fn elbo_with_noise(&self, x: &DiscreteImage, noise: &NoiseDraws) -> Result<ElboTerms> {
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.bind(&mut binder);
        let graph = self.graph(&tape, &vars, x, noise)?;
        self.terms_from_graph(&tape, &graph)
    }

    pub fn elbo(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<ElboTerms> {
        self.elbo_with_noise(x, &NoiseDraws::draw_srvae(&self.config, rng))
    }

    /// Four-term decomposition with the per-sample log-ratio for `KL_z`
    /// instead of the analytic form; this is the variant that coincides
    /// exactly with the joint/posterior direct form under shared noise.
    pub fn elbo_sampled_kl_with_noise(
        &self,
        x: &DiscreteImage,
        noise: &NoiseDraws,
    ) -> Result<ElboTerms> {
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.bind(&mut binder);
        let g = self.graph(&tape, &vars, x, noise)?;
        let terms = ElboTerms {
            re_x: -tape.item(g.lp_x),
            re_y: -tape.item(g.lp_y),
            kl_z: tape.item(g.lq_z) - tape.item(g.lp_z_prior),
            kl_u: tape.item(g.lq_u) - tape.item(g.lp_u_flow),
        };
        terms.check_finite()?;
        Ok(terms)
    }

    /// ELBO terms plus parameter gradients of
    /// `re_x + re_y + kl_scale * (kl_z + kl_u)`.
    pub fn elbo_grads_with_noise(
        &self,
        x: &DiscreteImage,
        noise: &NoiseDraws,
        kl_scale: f64,
    ) -> Result<(ElboTerms, Vec<DenseArray>)> {
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let vars = self.bind(&mut binder);
        let g = self.graph(&tape, &vars, x, noise)?;
        let terms = self.terms_from_graph(&tape, &g)?;
        let re = tape.add(tape.neg(g.lp_x), tape.neg(g.lp_y));
        let kl_u = tape.sub(g.lq_u, g.lp_u_flow);
        let kl = tape.add(g.kl_z_analytic, kl_u);
        let loss = tape.add(re, tape.mul_scalar(kl, kl_scale));
        let grads = collect_leaf_grads(&tape, loss, binder)?;
        Ok((terms, grads))
    }

    /// Single-draw importance weight `log p(x, y, z, u) - log q(y, z, u|x)`
    /// with the given compressed image `y`; off the support of the
    /// degenerate `q(y|x)` the weight has zero mass, reported as an error.
    pub fn log_weight_with_y(
        &self,
        x: &DiscreteImage,
        y: &DiscreteImage,
        rng: &mut RngStream,
    ) -> Result<f64> {
        let mass = degenerate_log_mass(y, x)?;
        if mass == f64::NEG_INFINITY {
            return Err(Error::NonFinite(
                "importance weight: y is off the support of q(y|x) (log-mass -inf)".into(),
            ));
        }
        let noise = NoiseDraws::draw_srvae(&self.config, rng);
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.bind(&mut binder);
        let g = self.graph(&tape, &vars, x, &noise)?;
        let w = tape.item(g.lp_x)
            + tape.item(g.lp_z_prior)
            + tape.item(g.lp_y)
            + tape.item(g.lp_u_flow)
            - tape.item(g.lq_z)
            - tape.item(g.lq_u)
            - mass;
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("importance weight {w}")));
        }
        Ok(w)
    }

    pub fn log_weight(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<f64> {
        let y = downscale(x)?;
        self.log_weight_with_y(x, &y, rng)
    }

    // ── single-network evaluations (sampling pipelines) ─────────────

    /// Variational posterior `q(u|y)`.
    pub fn posterior_u(&self, y: &DiscreteImage) -> DiagGaussianParams {
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.enc_u.bind(&mut binder);
        let out = self
            .enc_u
            .forward_t(&tape, &vars, tape.constant(y.to_unit_scale()));
        gaussian_params_from(&tape, gaussian_head(&tape, out, self.config.latent_k))
    }

    /// Variational posterior `q(z|x)`.
    pub fn posterior_z(&self, x: &DiscreteImage) -> DiagGaussianParams {
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.enc_z.bind(&mut binder);
        let out = self
            .enc_z
            .forward_t(&tape, &vars, tape.constant(x.to_unit_scale()));
        gaussian_params_from(&tape, gaussian_head(&tape, out, self.config.latent_m))
    }

    /// Conditional prior `p(z|y,u)`.
    pub fn conditional_prior_z(&self, y: &DiscreteImage, u: &DenseArray) -> DiagGaussianParams {
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.cond_z.bind(&mut binder);
        let y_in = tape.constant(y.to_unit_scale());
        let input = self.cond_z_input(&tape, y_in, tape.constant(u.clone()));
        let out = self.cond_z.forward_t(&tape, &vars, input);
        gaussian_params_from(&tape, gaussian_head(&tape, out, self.config.latent_m))
    }

    /// Likelihood parameters `p(y|u)`.
    pub fn decode_y(&self, u: &DenseArray) -> DLogisticMixtureParams {
        let cfg = &self.config;
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.dec_y.bind(&mut binder);
        let out = self.dec_y.forward_t(&tape, &vars, tape.constant(u.clone()));
        let mix = mixture_head(
            &tape,
            out,
            cfg.height / 2,
            cfg.width / 2,
            cfg.channels,
            cfg.n_mix,
        );
        mixture_params_from(&tape, &mix)
    }

    /// Likelihood parameters `p(x|z,y)`.
    pub fn decode_x(&self, z: &DenseArray, y: &DiscreteImage) -> DLogisticMixtureParams {
        let cfg = &self.config;
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = self.dec_x.bind(&mut binder);
        let y_in = tape.constant(y.to_unit_scale());
        let input = self.dec_x_input(&tape, y_in, tape.constant(z.clone()));
        let out = self.dec_x.forward_t(&tape, &vars, input);
        let mix = mixture_head(&tape, out, cfg.height, cfg.width, cfg.channels, cfg.n_mix);
        mixture_params_from(&tape, &mix)
    }

    /// Generation: `u ~ p(u) -> y ~ p(y|u) -> z ~ p(z|u,y) -> x ~ p(x|z,y)`.
    pub fn generate(&self, rng: &mut RngStream, n: usize) -> Result<Vec<GeneratedSample>> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u = self.prior_u.sample(rng);
            let y = dlogistic_sample(
                &self.decode_y(&u),
                cfg.height / 2,
                cfg.width / 2,
                cfg.channels,
                rng,
            )?;
            let z = gaussian_sample(
                &self.conditional_prior_z(&y, &u),
                &rng.normal_array(&[cfg.latent_m]),
            )?;
            let image = dlogistic_sample(
                &self.decode_x(&z, &y),
                cfg.height,
                cfg.width,
                cfg.channels,
                rng,
            )?;
            out.push(GeneratedSample {
                compressed: Some(y),
                image,
            });
        }
        Ok(out)
    }

    /// Super-resolution: `u ~ q(u|y) -> z ~ p(z|y,u) -> x ~ p(x|z,y)`.
    pub fn super_resolve(
        &self,
        y: &DiscreteImage,
        rng: &mut RngStream,
    ) -> Result<DiscreteImage> {
        self.check_compressed(y)?;
        let cfg = &self.config;
        let u = gaussian_sample(
            &self.posterior_u(y),
            &rng.normal_array(&[cfg.latent_k]),
        )?;
        let z = gaussian_sample(
            &self.conditional_prior_z(y, &u),
            &rng.normal_array(&[cfg.latent_m]),
        )?;
        dlogistic_sample(
            &self.decode_x(&z, y),
            cfg.height,
            cfg.width,
            cfg.channels,
            rng,
        )
    }

    /// Reconstruction: `y = d(x) -> z ~ q(z|x) -> x ~ p(x|z,y)`.
    pub fn reconstruct(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<DiscreteImage> {
        self.check_input(x)?;
        let cfg = &self.config;
        let y = downscale(x)?;
        let z = gaussian_sample(
            &self.posterior_z(x),
            &rng.normal_array(&[cfg.latent_m]),
        )?;
        dlogistic_sample(
            &self.decode_x(&z, &y),
            cfg.height,
            cfg.width,
            cfg.channels,
            rng,
        )
    }

    /// Generative reconstruction: `y* = d(x) -> u ~ q(u|y*) -> y ~ p(y|u)
    /// -> z ~ p(z|y,u) -> x ~ p(x|z,y)`; note `y` is re-sampled, not copied.
    pub fn generative_reconstruct(
        &self,
        x: &DiscreteImage,
        rng: &mut RngStream,
    ) -> Result<DiscreteImage> {
        self.check_input(x)?;
        let cfg = &self.config;
        let y_star = downscale(x)?;
        let u = gaussian_sample(
            &self.posterior_u(&y_star),
            &rng.normal_array(&[cfg.latent_k]),
        )?;
        let y = dlogistic_sample(
            &self.decode_y(&u),
            cfg.height / 2,
            cfg.width / 2,
            cfg.channels,
            rng,
        )?;
        let z = gaussian_sample(
            &self.conditional_prior_z(&y, &u),
            &rng.normal_array(&[cfg.latent_m]),
        )?;
        dlogistic_sample(
            &self.decode_x(&z, &y),
            cfg.height,
            cfg.width,
            cfg.channels,
            rng,
        )
    }

    /// The intermediate compressed sample of generative reconstruction, for
    /// inspecting how far `p(y|u)` wanders from `d(x)`.
    pub fn generative_reconstruct_y(
        &self,
        x: &DiscreteImage,
        rng: &mut RngStream,
    ) -> Result<DiscreteImage> {
        self.check_input(x)?;
        let y_star = downscale(x)?;
        let u = gaussian_sample(
            &self.posterior_u(&y_star),
            &rng.normal_array(&[self.config.latent_k]),
        )?;
        dlogistic_sample(
            &self.decode_y(&u),
            self.config.height / 2,
            self.config.width / 2,
            self.config.channels,
            rng,
        )
    }

    /// Mean analytic KL of `q(z|x)` against `p(z|y,u)` per `z` dimension
    /// over a batch, with one `u` draw per example. The posterior-collapse
    /// probe: dimensions with near-zero KL are ignored by the decoder.
    pub fn per_dimension_kl_z(
        &self,
        xs: &[DiscreteImage],
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument(
                "per-dimension KL needs at least one example".into(),
            ));
        }
        let m = self.config.latent_m;
        let mut acc = vec![0.0f64; m];
        for (i, x) in xs.iter().enumerate() {
            let mut stream = rng.child(&format!("perdim.{i}"));
            let y = downscale(x)?;
            let u = gaussian_sample(
                &self.posterior_u(&y),
                &stream.normal_array(&[self.config.latent_k]),
            )?;
            let q = self.posterior_z(x);
            let p = self.conditional_prior_z(&y, &u);
            for d in 0..m {
                let (mq, lq) = (q.mean.data()[d], q.log_var.data()[d]);
                let (mp, lp) = (p.mean.data()[d], p.log_var.data()[d]);
                let dm = mq - mp;
                acc[d] += 0.5 * ((lq - lp).exp() + dm * dm * (-lp).exp() - 1.0 + lp - lq);
            }
        }
        for v in &mut acc {
            *v /= xs.len() as f64;
        }
        Ok(acc)
    }
}

impl HasParams for SrvaeModel {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray)) {
        self.enc_u.for_each_param(&join(prefix, "enc_u"), f);
        self.enc_z.for_each_param(&join(prefix, "enc_z"), f);
        self.prior_u.for_each_param(&join(prefix, "prior_u"), f);
        self.dec_y.for_each_param(&join(prefix, "dec_y"), f);
        self.cond_z.for_each_param(&join(prefix, "cond_z"), f);
        self.dec_x.for_each_param(&join(prefix, "dec_x"), f);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        self.enc_u.for_each_param_mut(&join(prefix, "enc_u"), f);
        self.enc_z.for_each_param_mut(&join(prefix, "enc_z"), f);
        self.prior_u.for_each_param_mut(&join(prefix, "prior_u"), f);
        self.dec_y.for_each_param_mut(&join(prefix, "dec_y"), f);
        self.cond_z.for_each_param_mut(&join(prefix, "cond_z"), f);
        self.dec_x.for_each_param_mut(&join(prefix, "dec_x"), f);
    }
}

/// Numerical check of the lower-bound rearrangement: under one shared noise
/// draw, the direct form `log p(x,y,z,u) - log q(y,z,u|x)` (using the joint
/// factorization and the zero log-mass of the degenerate `q(y|x)`) must
/// equal minus the four-term loss with per-sample log-ratio KLs. Returns the
/// absolute discrepancy.
pub fn elbo_identity_check(
    model: &SrvaeModel,
    x: &DiscreteImage,
    rng: &mut RngStream,
) -> Result<f64> {
    let noise = NoiseDraws::draw_srvae(&model.config, rng);
    let tape = Tape::no_grad();
    let mut binder = Binder::new(&tape);
    let vars = model.bind(&mut binder);
    let g = model.graph(&tape, &vars, x, &noise)?;

    let y = downscale(x)?;
    let log_q_y = degenerate_log_mass(&y, x)?;
    if log_q_y == f64::NEG_INFINITY {
        return Err(Error::NonFinite(
            "identity check: q(y|x) has zero mass at the compressed image".into(),
        ));
    }
    let joint = tape.item(g.lp_x)
        + tape.item(g.lp_z_prior)
        + tape.item(g.lp_y)
        + tape.item(g.lp_u_flow);
    let posterior = tape.item(g.lq_z) + tape.item(g.lq_u) + log_q_y;
    let direct = joint - posterior;

    let re_x = -tape.item(g.lp_x);
    let re_y = -tape.item(g.lp_y);
    let kl_z = tape.item(g.lq_z) - tape.item(g.lp_z_prior);
    let kl_u = tape.item(g.lq_u) - tape.item(g.lp_u_flow);
    let four_term = -(re_x + re_y + kl_z + kl_u);

    Ok((direct - four_term).abs())
}

/// Either model behind one interface for training, evaluation and the CLI.
#[derive(Clone, Debug)]
pub enum Model {
    Vae(VaeModel),
    Srvae(SrvaeModel),
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Vae(m) => &m.config,
            Model::Srvae(m) => &m.config,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Vae(_) => "vae",
            Model::Srvae(_) => "srvae",
        }
    }

    pub fn draw_noise(&self, rng: &mut RngStream) -> NoiseDraws {
        match self {
            Model::Vae(m) => NoiseDraws::draw_vae(&m.config, rng),
            Model::Srvae(m) => NoiseDraws::draw_srvae(&m.config, rng),
        }
    }

    pub fn elbo(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<ElboTerms> {
        match self {
            Model::Vae(m) => m.elbo(x, rng),
            Model::Srvae(m) => m.elbo(x, rng),
        }
    }

    pub fn elbo_with_noise(&self, x: &DiscreteImage, noise: &NoiseDraws) -> Result<ElboTerms> {
        match self {
            Model::Vae(m) => m.elbo_with_noise(x, noise),
            Model::Srvae(m) => m.elbo_with_noise(x, noise),
        }
    }

    pub fn elbo_grads_with_noise(
        &self,
        x: &DiscreteImage,
        noise: &NoiseDraws,
        kl_scale: f64,
    ) -> Result<(ElboTerms, Vec<DenseArray>)> {
        match self {
            Model::Vae(m) => m.elbo_grads_with_noise(x, noise, kl_scale),
            Model::Srvae(m) => m.elbo_grads_with_noise(x, noise, kl_scale),
        }
    }

    pub fn log_weight(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<f64> {
        match self {
            Model::Vae(m) => m.log_weight(x, rng),
            Model::Srvae(m) => m.log_weight(x, rng),
        }
    }

    pub fn generate(&self, rng: &mut RngStream, n: usize) -> Result<Vec<GeneratedSample>> {
        match self {
            Model::Vae(m) => m.generate(rng, n),
            Model::Srvae(m) => m.generate(rng, n),
        }
    }

    pub fn reconstruct(&self, x: &DiscreteImage, rng: &mut RngStream) -> Result<DiscreteImage> {
        match self {
            Model::Vae(m) => m.reconstruct(x, rng),
            Model::Srvae(m) => m.reconstruct(x, rng),
        }
    }

    pub fn as_srvae(&self) -> Result<&SrvaeModel> {
        match self {
            Model::Srvae(m) => Ok(m),
            Model::Vae(_) => Err(Error::InvalidArgument(
                "operation requires the srVAE model".into(),
            )),
        }
    }
}

impl HasParams for Model {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray)) {
        match self {
            Model::Vae(m) => m.for_each_param(prefix, f),
            Model::Srvae(m) => m.for_each_param(prefix, f),
        }
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        match self {
            Model::Vae(m) => m.for_each_param_mut(prefix, f),
            Model::Srvae(m) => m.for_each_param_mut(prefix, f),
        }
    }
}

fn collect_leaf_grads(tape: &Tape, loss: Var, binder: Binder) -> Result<Vec<DenseArray>> {
    let mut grads = tape.backward(loss)?;
    Ok(binder
        .into_leaves()
        .into_iter()
        .map(|leaf| {
            grads
                .take(leaf)
                .unwrap_or_else(|| DenseArray::zeros(&tape.shape(leaf)))
        })
        .collect())
}
