use ltclip::checkpoint::{decode_store, Checkpoint};
use ltclip::config::{Mode, RunConfig};
use ltclip::data::{Profile, SynthSpec};
use ltclip::dataset_file::{decode_dataset, encode_dataset, ingest, write_dataset};
use ltclip::eval::evaluate;
use ltclip::{train, Placement};
use proptest::prelude::*;

fn spec(classes: usize, n_max: u64, dim: usize, seed: u64, pareto: bool) -> SynthSpec {
    SynthSpec {
        profile: if pareto { Profile::Pareto } else { Profile::Exponential },
        classes,
        n_max,
        rho: 8.0,
        alpha: 6.0,
        dim,
        sigma: 0.35,
        test_per_class: 3,
        seed,
    }
}

fn small_run(placement: Placement, mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        "epochs_a = 2\nepochs_b = 2\nbatch_size = 16\n\
         [dataset]\nsource = \"synthetic\"\nclasses = 4\nn_max = 30\nrho = 5.0\ndim = 3\ntest_per_class = 5\nseed = 8\n\
         [model]\nhidden = [6]\nvisual_out = 5\nembed_dim = 4\ntext_out = 5\njoint_dim = 4\n",
    )
    .unwrap();
    cfg.placement = placement;
    cfg.mode = mode;
    cfg
}

#[test]
fn reloaded_checkpoints_evaluate_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cases = Placement::ALL
        .into_iter()
        .map(|p| (p, Mode::TwoPhase))
        .chain([(Placement::Visual, Mode::PhaseAOnly), (Placement::Both, Mode::Joint)]);
    for (i, (placement, mode)) in cases.enumerate() {
        let cfg = small_run(placement, mode);
        let ds = cfg.dataset.load().unwrap();
        let out = train::run_on(&cfg, &ds).unwrap();
        let path = dir.path().join(format!("{i}.ltck"));
        out.checkpoint().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.checkpoint());
        let m = evaluate(&back.model, back.adapter.as_ref(), &ds, cfg.tau, cfg.prompt()).unwrap();
        assert_eq!(m, out.metrics, "{placement}/{mode}");
    }
}

#[test]
fn ingested_file_trains_like_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ltds");
    let cfg = small_run(Placement::Visual, Mode::TwoPhase);
    let ds = cfg.dataset.load().unwrap();
    write_dataset(&path, &ds).unwrap();
    let mut from_file = cfg.clone();
    from_file.dataset = ltclip::DatasetSource::File { path: path.clone() };
    let a = train::run(&cfg).unwrap();
    let b = train::run(&from_file).unwrap();
    assert_eq!(a.checkpoint().encode().unwrap(), b.checkpoint().encode().unwrap());
    assert_eq!(ingest(&path).unwrap(), ds);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_datasets_round_trip(
        classes in 2usize..6, n_max in 8u64..40, dim in 1usize..5, seed in any::<u64>(), pareto in any::<bool>()
    ) {
        let ds = spec(classes, n_max, dim, seed, pareto).generate().unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back), bytes);
    }

    #[test]
    fn mutated_dataset_bytes_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<bool>()) {
        let ds = spec(3, 12, 2, 5, false).generate().unwrap();
        let mut bytes = encode_dataset(&ds);
        let i = pos.index(bytes.len());
        if cut { bytes.truncate(i) } else { bytes[i] = byte }
        let _ = decode_dataset(&bytes);
    }

    #[test]
    fn mutated_checkpoint_bytes_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<bool>()) {
        let cfg = small_run(Placement::Both, Mode::ZeroShotBaseline);
        let ds = cfg.dataset.load().unwrap();
        let mut ck = train::run_on(&cfg, &ds).unwrap().checkpoint();
        ck.adapter = Some(train::init_adapter(&cfg, &ck.model).unwrap());
        let mut bytes = ck.encode().unwrap();
        let i = pos.index(bytes.len());
        if cut { bytes.truncate(i) } else { bytes[i] = byte }
        let _ = decode_store(&bytes);
        let _ = Checkpoint::decode(&bytes);
    }
}
