#![allow(dead_code)]

use toksum::autograd::ParamId;
use toksum::corpus::{build_vocab, toy_corpus, CodeSample};
use toksum::model::{EncodedSample, Model, ModelConfig};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_gat_layers: 2,
        ffn_dim: 32,
        k_clip: 4,
        dropout: 0.0,
        max_code_len: 150,
        max_summary_len: 30,
    }
}

pub fn corpus(seed: u64, n_train: usize) -> [Vec<CodeSample>; 3] {
    toy_corpus(seed, n_train, 10, 10).unwrap()
}

pub fn model_for(train: &[CodeSample], config: ModelConfig, seed: u64) -> Model {
    let (code, summary) = build_vocab(train, 1, 10_000).unwrap();
    Model::new(config, code, summary, seed).unwrap()
}

pub fn encode_all(model: &Model, samples: &[CodeSample]) -> Vec<EncodedSample> {
    samples.iter().map(|s| model.encode_sample(s)).collect()
}

pub fn param_by_name(model: &Model, name: &str) -> ParamId {
    model
        .params
        .iter()
        .find(|(_, p)| p.name == name)
        .map(|(id, _)| id)
        .unwrap_or_else(|| panic!("no parameter {name}"))
}

/// Worst relative error between autodiff and central differences over
/// `probes` coordinates of every parameter tensor.
pub fn gradient_check(model: &mut Model, sample: &EncodedSample, probes: usize, seed: u64) -> (f64, String) {
    use rand::{Rng, SeedableRng};
    let (grads, _, _) = model.sample_gradients(sample, None).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut worst = (0.0, String::new());
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = model.params.value(id).len();
        let name = model.params.get(id).name.clone();
        for _ in 0..probes {
            let i = rng.gen_range(0..n);
            let orig = model.params.value(id).data()[i];
            model.params.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = model.sample_loss(sample).unwrap();
            model.params.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = model.sample_loss(sample).unwrap();
            model.params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: autodiff {analytic:e} vs numeric {numeric:e}"));
            }
        }
    }
    worst
}
