use cmat::env::{EnvSpec, Environment, MatrixGameSpec, SpreadGridSpec};
use cmat::policy::{ActMode, DecisionCache, ModelConfig, ModelKind, PolicyModel};
use cmat::trainer::{decode_checkpoint, encode_checkpoint, restore, save_checkpoint, FORMAT_VERSION};
use cmat::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spread_model(kind: ModelKind, m: usize) -> (ModelConfig, PolicyModel, cmat::params::ParameterStore) {
    let (n, a, w) = EnvSpec::Spread(SpreadGridSpec::default()).dims().unwrap();
    let cfg = ModelConfig::new(kind, w, a, n).with_iterations(m);
    let (model, store) = PolicyModel::build(&cfg, 31).unwrap();
    (cfg, model, store)
}

#[test]
fn encoding_round_trips_byte_for_byte() {
    for kind in ModelKind::ALL {
        let (cfg, _, mut store) = spread_model(kind, 2);
        store.freeze_prefixes(&["embed."]);
        let bytes = encode_checkpoint(&store, &cfg).unwrap();
        let (cfg2, store2) = decode_checkpoint(&bytes, Some(kind)).unwrap();
        assert_eq!(cfg2, cfg);
        assert!(store2.same_layout(&store));
        for ((id, _, p), (_, _, q)) in store.iter().zip(store2.iter()) {
            assert!(p.value.bit_eq(&q.value));
            assert_eq!(store.is_frozen(id), q.frozen);
        }
        assert_eq!(encode_checkpoint(&store2, &cfg2).unwrap(), bytes);
    }
}

#[test]
fn corrupt_files_are_refused() {
    let (cfg, _, store) = spread_model(ModelKind::Cmat, 2);
    let bytes = encode_checkpoint(&store, &cfg).unwrap();
    let refused = |b: &[u8]| matches!(decode_checkpoint(b, None), Err(Error::Checkpoint(_)));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(refused(&magic));

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(refused(&version));

    assert!(refused(&bytes[..bytes.len() - 1]));
    assert!(refused(&bytes[..40]));
    assert!(refused(&[]));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(refused(&longer));
}

#[test]
fn kind_mismatch_is_refused() {
    let (cfg, _, store) = spread_model(ModelKind::Cmat, 2);
    let bytes = encode_checkpoint(&store, &cfg).unwrap();
    let err = decode_checkpoint(&bytes, Some(ModelKind::MatSequential)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert!(decode_checkpoint(&bytes, Some(ModelKind::Cmat)).is_ok());

    let (seq_cfg, _, _) = spread_model(ModelKind::MatSequential, 2);
    assert!(encode_checkpoint(&store, &seq_cfg).is_err());
}

#[test]
fn reloaded_models_act_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = EnvSpec::Matrix(MatrixGameSpec::default());
    let (n, a, w) = spec.dims().unwrap();
    for m in [0, 2] {
        let cfg = ModelConfig::new(ModelKind::Cmat, w, a, n).with_iterations(m);
        let (model, store) = PolicyModel::build(&cfg, 5).unwrap();
        let path = dir.path().join(format!("m{m}.bin"));
        save_checkpoint(&store, &cfg, &path).unwrap();
        let (model2, store2) = restore(&path, Some(ModelKind::Cmat)).unwrap();
        assert_eq!(model2.config().consensus_iterations, m);

        let obs = vec![spec.build().unwrap().reset()];
        let act = |model: &PolicyModel, store| {
            let mut rng = [ChaCha8Rng::seed_from_u64(0)];
            let d = model.decide(store, &obs, ActMode::Greedy, &mut rng, &mut DecisionCache::new()).unwrap();
            (d[0].actions.clone(), d[0].log_probs.clone())
        };
        assert_eq!(act(&model, &store), act(&model2, &store2));
    }
}

#[test]
fn missing_files_surface_as_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = restore(dir.path().join("absent.bin"), None).unwrap_err();
    assert!(matches!(err, Error::Io(_)), "{err}");
}
