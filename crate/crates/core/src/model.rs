//! Encoder, optional feature-level expert bank, classifier, optional
//! prediction-level expert bank.

use rand::Rng;

use crate::config::RunConfig;
use crate::eaf::{BankConfig, ExpertBank};
use crate::error::Result;
use crate::nn::{BoundParams, LinearLayer, MlpEncoder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Encoder layer widths; the last entry is the feature dimension.
    pub encoder_widths: Vec<usize>,
    pub num_classes: usize,
    pub semantic: Option<BankConfig>,
    pub instance: Option<BankConfig>,
}

impl ModelSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let mut encoder_widths = cfg.hidden_widths.clone();
        encoder_widths.push(cfg.feature_dim);
        Self {
            input_dim: cfg.input_dim,
            encoder_widths,
            num_classes: cfg.num_classes,
            semantic: cfg.semantic_eaf.then(|| cfg.bank_config(cfg.feature_dim)),
            instance: cfg.instance_eaf.then(|| cfg.bank_config(cfg.num_classes)),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub features: Var,
    pub fused_features: Var,
    pub logits: Var,
    /// Final class scores after the prediction-level bank.
    pub fused_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafModel {
    encoder: MlpEncoder,
    semantic: Option<ExpertBank>,
    classifier: LinearLayer,
    instance: Option<ExpertBank>,
    num_classes: usize,
}

impl LeafModel {
    pub fn new<R: Rng>(spec: &ModelSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let encoder = MlpEncoder::new(store, spec.input_dim, &spec.encoder_widths, rng)?;
        let feat = encoder.output_dim();
        let semantic = spec
            .semantic
            .map(|cfg| ExpertBank::new(store, "semantic", BankConfig { width: feat, ..cfg }, rng))
            .transpose()?;
        let classifier = LinearLayer::new(store, "classifier", feat, spec.num_classes, rng)?;
        let instance = spec
            .instance
            .map(|cfg| {
                ExpertBank::new(
                    store,
                    "instance",
                    BankConfig {
                        width: spec.num_classes,
                        ..cfg
                    },
                    rng,
                )
            })
            .transpose()?;
        Ok(Self {
            encoder,
            semantic,
            classifier,
            instance,
            num_classes: spec.num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn encoder(&self) -> &MlpEncoder {
        &self.encoder
    }

    pub fn semantic_bank(&self) -> Option<&ExpertBank> {
        self.semantic.as_ref()
    }

    pub fn instance_bank(&self) -> Option<&ExpertBank> {
        self.instance.as_ref()
    }

    pub fn classifier(&self) -> &LinearLayer {
        &self.classifier
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<ModelOutput> {
        let features = self.encoder.forward(tape, params, x)?;
        let fused_features = match &self.semantic {
            Some(bank) => bank.fuse(tape, params, features)?,
            None => features,
        };
        let logits = self.classifier.forward(tape, params, fused_features)?;
        let fused_logits = match &self.instance {
            Some(bank) => bank.fuse(tape, params, logits)?,
            None => logits,
        };
        Ok(ModelOutput {
            features,
            fused_features,
            logits,
            fused_logits,
        })
    }

    /// Final class scores for every row of `x`, without recording gradients.
    pub fn predict_logits(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, input)?;
        Ok(tape.value(out.fused_logits).clone())
    }

    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_logits(store, x)?.argmax_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &RunConfig) -> (ParamStore, LeafModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = LeafModel::new(&ModelSpec::from_config(cfg), &mut store, &mut rng).unwrap();
        (store, m)
    }

    fn input(rows: usize, cols: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_through_the_pipeline() {
        let cfg = RunConfig::default();
        let (store, m) = build(&cfg);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input(5, cfg.input_dim));
        let out = m.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.features), (5, cfg.feature_dim));
        assert_eq!(tape.shape(out.fused_features), (5, cfg.feature_dim));
        assert_eq!(tape.shape(out.logits), (5, cfg.num_classes));
        assert_eq!(tape.shape(out.fused_logits), (5, cfg.num_classes));
    }

    #[test]
    fn rows_are_processed_independently() {
        let cfg = RunConfig::default();
        let (store, m) = build(&cfg);
        let x = input(6, cfg.input_dim);
        let joint = m.predict_logits(&store, &x).unwrap();
        for r in 0..6 {
            let single = m.predict_logits(&store, &x.select_rows(&[r])).unwrap();
            assert_eq!(single.row(0), joint.row(r));
        }
    }

    #[test]
    fn disabled_banks_add_no_parameters() {
        let full = build(&RunConfig::default()).0;
        let bare = build(&RunConfig {
            semantic_eaf: false,
            instance_eaf: false,
            ..RunConfig::default()
        })
        .0;
        assert!(bare.len() < full.len());
        assert!(bare.names().iter().all(|n| !n.starts_with("semantic") && !n.starts_with("instance")));
    }
}
