use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsr_core::encoder::{PatchGrid, VisualEncoder};
use tsr_core::imageio::Normalizer;
use tsr_core::mim::MimModel;
use tsr_core::nn::{LayerConfig, ParamStore};
use tsr_core::synth::{generate_sample, SynthConfig};
use tsr_core::tsr::{evaluate_model, finetune, FinetuneConfig, Init, Sample, Schedule};

fn samples(n: usize) -> Vec<Sample> {
    let cfg = SynthConfig { span_prob: 0.5, ..SynthConfig::default() };
    let raw: Vec<_> = (0..n).map(|i| generate_sample(&cfg, 100 + i).unwrap()).collect();
    let norm = Normalizer::fit(&raw.iter().map(|r| r.2.clone()).collect::<Vec<_>>());
    raw.into_iter()
        .enumerate()
        .map(|(i, (_, tokens, image))| Sample { id: i.to_string(), image: norm.apply(&image), tokens })
        .collect()
}

fn layers() -> LayerConfig {
    LayerConfig { d_model: 32, ffn_dim: 64, heads: 2, dropout: 0.0, enc_layers: 1, dec_layers: 2 }
}

fn grid() -> PatchGrid {
    PatchGrid::new(64, 64, 3, 8).unwrap()
}

#[test]
fn memorizes_a_single_table() {
    let data = samples(1);
    let cfg = FinetuneConfig { epochs: 300, warmup_epochs: 10, batch_size: 1, peak_lr: 3e-3, val_every: 0, ..FinetuneConfig::desk() };
    let out = finetune(&data, &[], grid(), &layers(), Init::Scratch, Schedule::Full, &cfg, 1, |_| {}).unwrap();
    let report = evaluate_model(&out.model, &out.store, &data).unwrap();
    assert_eq!(report.mean_all, 100.0, "loss {:?}", out.history.last());
}

#[test]
fn frozen_schedule_leaves_pretrained_encoder_untouched() {
    let data = samples(6);
    let mut store = ParamStore::new();
    MimModel::new(&mut store, grid(), &layers(), 16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let pretrained = store.hash_prefix(VisualEncoder::PREFIX);
    let cfg = FinetuneConfig { epochs: 3, batch_size: 3, val_every: 0, ..FinetuneConfig::desk() };

    let frozen = finetune(&data, &[], grid(), &layers(), Init::Pretrained(&store), Schedule::Frozen, &cfg, 2, |_| {}).unwrap();
    assert_eq!(frozen.encoder_hash_before, pretrained);
    assert_eq!(frozen.encoder_hash_after, pretrained);
    assert_eq!(frozen.store.hash_prefix(VisualEncoder::PREFIX), pretrained);
    assert_ne!(frozen.store.hash_prefix("decoder."), {
        let mut fresh = ParamStore::<f32>::new();
        tsr_core::tsr::TsrModel::new(&mut fresh, grid(), &layers(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        fresh.hash_prefix("decoder.")
    });

    let full = finetune(&data, &[], grid(), &layers(), Init::Pretrained(&store), Schedule::Full, &cfg, 2, |_| {}).unwrap();
    assert_eq!(full.encoder_hash_before, pretrained);
    assert_ne!(full.encoder_hash_after, pretrained);
}

#[test]
fn same_seed_same_model() {
    let data = samples(4);
    let cfg = FinetuneConfig { epochs: 2, batch_size: 2, val_every: 1, ..FinetuneConfig::desk() };
    let run = || finetune(&data, &data[..2], grid(), &layers(), Init::Scratch, Schedule::Full, &cfg, 9, |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.store.hash_prefix(""), b.store.hash_prefix(""));
    assert_eq!(a.history, b.history);
}
