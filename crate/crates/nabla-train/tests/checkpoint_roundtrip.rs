//! Checkpoint format: bit-exact round trips, strict restore, transfer
//! matching, and rejection of malformed bytes without panics.

use nabla_core::blocks::Mode;
use nabla_core::model::{Model, ModelSpec, Variant};
use nabla_core::optim::{adam_step, collect_grads, AdamState};
use nabla_core::{Shape, Tensor};
use nabla_train::checkpoint::{Checkpoint, CheckpointError, OptimSnapshot, StoredTensor, FORMAT_VERSION};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> ModelSpec {
    let mut spec = ModelSpec::nabla(Variant::AB, 2);
    spec.widths = Some(vec![2, 4, 8]);
    spec.input_size = 8;
    spec.in_channels = Some(1);
    spec
}

/// A model whose running statistics differ from initialization, so the
/// round trip also covers non-trainable state.
fn trained_bit<E: nabla_core::Scalar>() -> Model<E> {
    let mut model: Model<E> = Model::build(&tiny_spec(), 33).unwrap();
    let input = Tensor::new(
        Shape::new(2, 1, 8, 8),
        (0..128).map(|i| E::from_f64((i % 17) as f64 / 17.0)).collect(),
    )
    .unwrap();
    let (mut ctx, _y) = model.forward_segment(input, Mode::Train, false).unwrap();
    for (id, data) in ctx.take_state_updates() {
        model.params.entry_mut(id).value.data_mut().copy_from_slice(&data);
    }
    model
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let model = trained_bit::<f32>();
    let ckpt = Checkpoint::from_model(&model, 7, None);
    let decoded = Checkpoint::decode(&ckpt.encode()).unwrap();
    assert_eq!(decoded.epoch, 7);
    assert_eq!(decoded.version, FORMAT_VERSION);
    assert_eq!(decoded.spec, model.spec);

    let restored: Model<f32> = decoded.into_model().unwrap();
    assert_eq!(restored.params.len(), model.params.len());
    for ((_, a), (_, b)) in model.params.iter().zip(restored.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        assert_eq!(bits(a.value.data()), bits(b.value.data()), "tensor {} drifted", a.name);
    }
}

#[test]
fn save_load_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.nbln");
    let model = trained_bit::<f32>();
    Checkpoint::from_model(&model, 3, None).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let restored: Model<f32> = loaded.into_model().unwrap();
    for ((_, a), (_, b)) in model.params.iter().zip(restored.params.iter()) {
        assert_eq!(bits(a.value.data()), bits(b.value.data()));
    }
}

#[test]
fn manifest_names_every_parameter_entry() {
    let model: Model<f32> = Model::build(&tiny_spec(), 1).unwrap();
    let ckpt = Checkpoint::from_model(&model, 0, None);
    assert_eq!(ckpt.tensors.len(), model.params.len());
    for (stored, (_, entry)) in ckpt.tensors.iter().zip(model.params.iter()) {
        assert_eq!(stored.name, entry.name);
        assert_eq!(stored.shape, entry.value.shape());
        assert_eq!(stored.trainable, entry.trainable);
    }
}

#[test]
fn optimizer_state_survives_the_round_trip() {
    let mut model: Model<f32> = Model::build(&tiny_spec(), 5).unwrap();
    let input =
        Tensor::new(Shape::new(1, 1, 8, 8), (0..64).map(|i| (i % 9) as f32 / 9.0).collect()).unwrap();
    let target = Tensor::new(Shape::new(1, 1, 8, 8), vec![1.0f32; 64]).unwrap();
    let mut state = AdamState::new();
    for _ in 0..2 {
        let (mut ctx, y) = model.forward_segment(input.clone(), Mode::Train, true).unwrap();
        let loss = ctx.tape.bce_loss(y, &target).unwrap();
        ctx.tape.backward(loss).unwrap();
        let grads = collect_grads(&ctx, &model.params);
        for (id, data) in ctx.take_state_updates() {
            model.params.entry_mut(id).value.data_mut().copy_from_slice(&data);
        }
        adam_step(&mut model.params, &grads, &mut state, 1e-3).unwrap();
    }
    let snapshot = OptimSnapshot::adam(&state);
    let ckpt = Checkpoint::from_model(&model, 2, Some(snapshot.clone()));
    let decoded = Checkpoint::decode(&ckpt.encode()).unwrap();
    assert_eq!(decoded.optimizer.as_ref(), Some(&snapshot));
    let back: AdamState<f32> = decoded.optimizer.unwrap().restore_adam().unwrap();
    assert_eq!(back.step, 2);
    assert_eq!(back.m.len(), state.m.len());
    for (a, b) in state.m.iter().zip(&back.m) {
        assert_eq!(bits(a), bits(b));
    }
    for (a, b) in state.v.iter().zip(&back.v) {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = Checkpoint::from_model(&Model::<f32>::build(&tiny_spec(), 0).unwrap(), 0, None).encode();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::BadMagic)));
}

#[test]
fn version_mismatch_is_rejected() {
    let mut bytes = Checkpoint::from_model(&Model::<f32>::build(&tiny_spec(), 0).unwrap(), 0, None).encode();
    bytes[4] = 99;
    match Checkpoint::decode(&bytes) {
        Err(CheckpointError::Version { found }) => assert_eq!(found, 99),
        other => panic!("expected version error, got {other:?}"),
    }
}

#[test]
fn every_truncation_point_is_rejected_without_panic() {
    let bytes = Checkpoint::from_model(&trained_bit::<f32>(), 1, None).encode();
    // Sweep the structurally interesting prefix plus samples of the
    // payload region.
    let mut cuts: Vec<usize> = (0..200.min(bytes.len())).collect();
    cuts.extend((200..bytes.len()).step_by(97));
    cuts.push(bytes.len() - 1);
    for cut in cuts {
        let err = Checkpoint::decode(&bytes[..cut]);
        assert!(err.is_err(), "prefix of {cut} bytes decoded");
    }
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = Checkpoint::from_model(&Model::<f32>::build(&tiny_spec(), 0).unwrap(), 0, None).encode();
    bytes.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::TrailingBytes { extra: 4 })));
    bytes.pop();
    // Three stray bytes break f32 alignment instead.
    assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::TrailingBytes { extra: 3 })));
}

#[test]
fn corrupt_manifest_js_is_rejected() {
    let model: Model<f32> = Model::build(&tiny_spec(), 0).unwrap();
    let bytes = Checkpoint::from_model(&model, 0, None).encode();
    // Locate the manifest block: magic(4) version(4) spec_len(4) spec.
    let spec_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest_start = 12 + spec_len + 4;
    let mut corrupted = bytes.clone();
    corrupted[manifest_start] = b'!';
    assert!(matches!(Checkpoint::decode(&corrupted), Err(CheckpointError::BadManifest(_))));
}

#[test]
fn overlapping_offsets_are_rejected() {
    let model: Model<f32> = Model::build(&tiny_spec(), 0).unwrap();
    let bytes = Checkpoint::from_model(&model, 0, None).encode();
    let spec_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest_len_at = 12 + spec_len;
    let manifest_len = u32::from_le_bytes(bytes[manifest_len_at..manifest_len_at + 4].try_into().unwrap()) as usize;
    let manifest_start = manifest_len_at + 4;
    let manifest = String::from_utf8(bytes[manifest_start..manifest_start + manifest_len].to_vec()).unwrap();
    // Shift the first tensor's offset: same-length edit keeps the
    // framing valid while the regions now overlap or gap.
    let patched = manifest.replacen("\"offset\":0,", "\"offset\":4,", 1);
    assert_ne!(patched, manifest, "expected to find the first offset");
    let mut out = bytes[..manifest_start].to_vec();
    out.extend_from_slice(patched.as_bytes());
    out.extend_from_slice(&bytes[manifest_start + manifest_len..]);
    match Checkpoint::decode(&out) {
        Err(CheckpointError::BadManifest(msg)) => assert!(msg.contains("overlap"), "got: {msg}"),
        other => panic!("expected manifest rejection, got {other:?}"),
    }
}

#[test]
fn shape_element_disagreement_is_rejected() {
    let model: Model<f32> = Model::build(&tiny_spec(), 0).unwrap();
    let mut ckpt = Checkpoint::from_model(&model, 0, None);
    ckpt.tensors[0].shape = Shape::new(1, 1, 1, 1);
    match Checkpoint::decode(&ckpt.encode()) {
        Err(CheckpointError::BadManifest(msg)) => assert!(msg.contains("elements"), "got: {msg}"),
        other => panic!("expected manifest rejection, got {other:?}"),
    }
}

#[test]
fn strict_restore_rejects_missing_renamed_or_extra_tensors() {
    let model: Model<f32> = Model::build(&tiny_spec(), 0).unwrap();

    let mut missing = Checkpoint::from_model(&model, 0, None);
    let dropped = missing.tensors.pop().unwrap();
    let err = missing.into_model::<f32>().unwrap_err().to_string();
    assert!(err.contains(&dropped.name), "unexpected: {err}");

    let mut renamed = Checkpoint::from_model(&model, 0, None);
    renamed.tensors[0].name = "imposter".into();
    assert!(renamed.into_model::<f32>().is_err());

    let mut extra = Checkpoint::from_model(&model, 0, None);
    extra.tensors.push(StoredTensor {
        name: "ghost".into(),
        shape: Shape::new(1, 1, 1, 1),
        values: vec![0.0],
        trainable: false,
    });
    let err = extra.into_model::<f32>().unwrap_err().to_string();
    assert!(err.contains("ghost"), "unexpected: {err}");
}

#[test]
fn same_spec_transfer_loads_every_tensor() {
    let source = trained_bit::<f32>();
    let ckpt = Checkpoint::from_model(&source, 9, None);
    let mut target: Model<f32> = Model::build(&tiny_spec(), 777).unwrap();
    let report = ckpt.transfer_into(&mut target);
    assert_eq!(report.loaded.len(), source.params.len());
    assert!(report.skipped.is_empty());
    for ((_, a), (_, b)) in source.params.iter().zip(target.params.iter()) {
        assert_eq!(bits(a.value.data()), bits(b.value.data()));
    }
}

#[test]
fn class_count_mismatch_skips_only_the_head() {
    let mut spec3 = ModelSpec::irrcnn();
    spec3.widths = Some(vec![4, 4, 8, 8]);
    spec3.input_size = 16;
    spec3.in_channels = Some(1);
    spec3.classes = 3;
    let mut spec5 = spec3.clone();
    spec5.classes = 5;

    let source: Model<f32> = Model::build(&spec3, 2).unwrap();
    let ckpt = Checkpoint::from_model(&source, 0, None);
    let mut target: Model<f32> = Model::build(&spec5, 3).unwrap();
    let report = ckpt.transfer_into(&mut target);
    assert!(!report.skipped.is_empty());
    for name in &report.skipped {
        assert!(name.starts_with("head"), "unexpected skip: {name}");
    }
    assert_eq!(report.loaded.len() + report.skipped.len(), target.params.len());
    // Loaded tensors must carry the source values.
    for name in &report.loaded {
        let s = source.params.id_of(name).unwrap();
        let t = target.params.id_of(name).unwrap();
        assert_eq!(bits(source.params.value(s).data()), bits(target.params.value(t).data()), "{name}");
    }
}

#[test]
fn empty_checkpoint_transfer_reports_a_full_skip_list() {
    let model: Model<f32> = Model::build(&tiny_spec(), 0).unwrap();
    let empty = Checkpoint {
        version: FORMAT_VERSION,
        spec: tiny_spec(),
        epoch: 0,
        tensors: Vec::new(),
        optimizer: None,
    };
    let mut target = model;
    let report = empty.transfer_into(&mut target);
    assert!(report.loaded.is_empty());
    assert_eq!(report.skipped.len(), target.params.len());
}

#[test]
fn random_mutations_never_panic_the_decoder() {
    let valid = Checkpoint::from_model(&Model::<f32>::build(&tiny_spec(), 0).unwrap(), 0, None).encode();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for _ in 0..500 {
        let mut fuzzed = valid.clone();
        for _ in 0..rng.random_range(1..8) {
            let at = rng.random_range(0..fuzzed.len());
            fuzzed[at] = rng.random::<u8>();
        }
        if rng.random::<f64>() < 0.3 {
            fuzzed.truncate(rng.random_range(0..fuzzed.len()));
        }
        let _ = Checkpoint::decode(&fuzzed);
    }
    for _ in 0..200 {
        let blob: Vec<u8> = (0..rng.random_range(0..300)).map(|_| rng.random()).collect();
        let _ = Checkpoint::decode(&blob);
    }
}
