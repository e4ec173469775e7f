//! Embedding network plus metric: the complete episode classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::encoder::{format_placement, Encoder, EncoderConfig, EncoderOutput};
use crate::episodes::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore, ParamVars};
use crate::ops;
use crate::similarity::{self, Metric};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Projection width of the metric; defaults to the encoder's output channels.
    pub metric_dim: Option<usize>,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self { encoder, metric_dim: None }
    }

    pub fn d_g(&self) -> usize {
        self.metric_dim.unwrap_or(self.encoder.output_shape().0)
    }

    /// Text listing every setting that affects parameter names or shapes, one `key=value` per line.
    pub fn canonical_architecture(&self) -> String {
        let e = &self.encoder;
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let pool: Vec<usize> = e.pool.iter().map(|&p| p as usize).collect();
        format!(
            "backbone={}\nwidths={}\npool={}\narf_placement={}\nbranch_mode={}\nrho_max={}\nsigma_step={}\nkappa={:?}\n\
             eca_window={}\nfrozen_bank={}\nimage_size={}\nin_channels={}\nleaky_slope={:?}\ntie_branches={}\nd_g={}\n",
            e.backbone,
            join(&e.widths),
            join(&pool),
            format_placement(&e.arf_placement),
            e.branch_mode,
            e.rho_max,
            e.sigma_step,
            e.kappa,
            e.eca_window,
            e.frozen_bank,
            e.image_size,
            e.in_channels,
            e.leaky_slope,
            e.tie_branches,
            self.d_g(),
        )
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_architecture().as_bytes()).into()
    }
}

/// Parameters, batch-norm buffers and the structure that interprets them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

/// Tape-level results of one episode pass.
pub struct EpisodePass<'t> {
    /// `[n_query, way]` class distances.
    pub distances: Var<'t>,
    pub encoded: EncoderOutput<'t>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(config.encoder.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut params, mut buffers) = (ParamStore::new(), ParamStore::new());
        encoder.init(&mut params, &mut buffers, &mut rng);
        similarity::init_metric(config.encoder.output_shape().0, config.d_g(), &mut params, &mut rng);
        Ok(Self { config, encoder, params, buffers })
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.encoder.is_trainable(name)
    }

    pub fn forward_context<'a, 't>(&'a self, tape: &'t Tape, vars: &'a ParamVars<'t>, train: bool) -> Forward<'a, 't> {
        Forward::new(tape, vars, &self.buffers, train, self.config.encoder.leaky_slope)
    }

    /// Encodes `[S+Q, C0, H, W]` (support first, class-major) and measures every query against every class.
    pub fn episode_pass<'t>(&self, ctx: &Forward<'_, 't>, images: Var<'t>, way: usize, shot: usize) -> Result<EpisodePass<'t>> {
        let n_support = way * shot;
        let total = images.shape()[0];
        if total <= n_support {
            return Err(Error::Episode(format!("{total} images leave no queries after {n_support} support samples")));
        }
        let encoded = self.encoder.encode(ctx, images)?;
        let (_, h, w) = self.config.encoder.output_shape();
        let m = h * w;
        let tokens = similarity::tokenize(encoded.features)?;
        let support = ops::slice(tokens, 0, 0, n_support * m)?;
        let query = ops::slice(tokens, 0, n_support * m, (total - n_support) * m)?;
        let metric = Metric::from_vars(ctx.params)?;
        let distances = similarity::episode_distances(support, query, way, m, &metric)?;
        Ok(EpisodePass { distances, encoded })
    }

    /// Query class probabilities `[n_query, way]` in evaluation mode.
    pub fn probabilities(&self, dataset: &Dataset, episode: &Episode) -> Result<Tensor> {
        let tape = Tape::inference();
        let vars = self.params.vars(&tape, |_| false);
        let ctx = self.forward_context(&tape, &vars, false);
        let images = tape.constant(episode.images(dataset)?);
        let pass = self.episode_pass(&ctx, images, episode.way, episode.shot)?;
        let p = ops::softmax(similarity::logits_from_distances(pass.distances), 1)?;
        Ok((*p.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{parse_placement, Backbone};
    use crate::episodes::{generate_synthetic_dataset, EpisodeSampler, Split, SyntheticSpec};

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut e = EncoderConfig {
            widths: vec![4, 4],
            pool: vec![true, true],
            image_size: 8,
            ..EncoderConfig::default()
        };
        e.arf_placement = parse_placement("all", Backbone::Conv4Mini, 2).unwrap();
        ModelConfig::new(e)
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = tiny_config();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.encoder.kappa = 0.2;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.encoder.bn_momentum = 0.5;
        assert_eq!(a.hash(), c.hash());
        assert!(a.canonical_architecture().contains("arf_placement=spatial:1:1,spatial:2:1,frequency:1:1,frequency:2:1\n"));
    }

    #[test]
    fn probabilities_are_rows_of_the_simplex() {
        let spec = SyntheticSpec { image_size: 8, samples_per_class: 6, ..SyntheticSpec::default() };
        let ds = generate_synthetic_dataset(&spec, 0).unwrap();
        let model = Model::new(tiny_config(), 1).unwrap();
        let sampler = EpisodeSampler { seed: 0, stream: 0, split: Split::Test, way: 3, shot: 2, query_per_class: 2 };
        let p = model.probabilities(&ds, &sampler.episode(&ds, 0).unwrap()).unwrap();
        assert_eq!(p.shape(), [6, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
