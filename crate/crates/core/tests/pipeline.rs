//! File-based workflows: gzip input, checkpoints, basis files and block
//! caches.

use std::fs::File;
use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use nystrom_tron::basis::{read_basis_file, write_basis_file, BasisPolicy};
use nystrom_tron::data::{open_dataset, shard_random, Dataset};
use nystrom_tron::driver::{evaluate, predict, train_files, BasisChoice, TrainConfig};
use nystrom_tron::kernel::{build_kernel_block, read_block_cache, w_row_ranges, write_block_cache};
use nystrom_tron::synth::GaussianMixture;
use nystrom_tron::{Error, HyperParams, ModelState};

fn write_gz(path: &std::path::Path, text: &str) {
    let mut enc = GzEncoder::new(File::create(path).unwrap(), Compression::fast());
    enc.write_all(text.as_bytes()).unwrap();
    enc.finish().unwrap();
}

#[test]
fn gzip_train_checkpoint_and_basis_file() {
    let dir = tempfile::tempdir().unwrap();
    let g = GaussianMixture::blobs(4, 3, 4.0, 0.6, 21);
    let train = Dataset { examples: g.sample(400, 1), dim: 3 };
    let test = Dataset { examples: g.sample(200, 2), dim: 3 };
    let train_path = dir.path().join("train.svm.gz");
    let test_path = dir.path().join("test.svm");
    write_gz(&train_path, &train.to_libsvm());
    std::fs::write(&test_path, test.to_libsvm()).unwrap();
    assert_eq!(open_dataset(&train_path).unwrap(), train);

    let mut cfg = TrainConfig::new(HyperParams::new(0.2, 1.0).unwrap(), 12, 2);
    cfg.basis = BasisChoice::Policy(BasisPolicy::auto());
    let (model, report) = train_files(&train_path, Some(&test_path), &cfg).unwrap();
    assert_eq!(report.config.basis, "kmeans");
    assert_eq!(report.kmeans_inertia.len(), 3);
    assert!(report.test_accuracy.unwrap() > 0.9);

    let model_path = dir.path().join("model.mdl");
    model.save(&model_path).unwrap();
    let loaded = ModelState::load(&model_path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(predict(&loaded, &test.examples), predict(&model, &test.examples));
    assert_eq!(evaluate(&loaded, &test.examples), report.test_accuracy.unwrap());

    // Re-training from the saved basis file reproduces the run exactly.
    let basis_path = dir.path().join("basis.txt");
    write_basis_file(&basis_path, &model.basis, cfg.seed).unwrap();
    let (basis, seed) = read_basis_file(&basis_path).unwrap();
    assert_eq!(seed, 0);
    assert_eq!(basis, model.basis);
    let given = TrainConfig { basis: BasisChoice::Given(basis), ..cfg.clone() };
    let (again, r2) = train_files(&train_path, None, &given).unwrap();
    assert_eq!(again.beta, model.beta);
    assert_eq!(r2.final_objective, report.final_objective);
}

#[test]
fn block_cache_survives_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = GaussianMixture::two_class(3, 0.5, 1).sample(50, 3);
    let shards = shard_random(&data, 2, 4).unwrap();
    let basis = nystrom_tron::basis::select_random(&shards, 5, 0, 0.8).unwrap();
    let params = HyperParams::new(1.0, 0.8).unwrap();
    let block = build_kernel_block(&shards[1], &basis, &params, w_row_ranges(5, 2)[1].clone()).unwrap();
    let path = dir.path().join("block.kbc");
    write_block_cache(&path, &block, &basis).unwrap();
    let back = read_block_cache(&path, &basis).unwrap();
    assert_eq!(back.c_block, block.c_block);
    assert_eq!(back.w_rows, block.w_rows);
    assert_eq!(back.w_row_ids, block.w_row_ids);
    assert_eq!(back.labels, block.labels);

    let other = nystrom_tron::basis::select_random(&shards, 5, 1, 0.8).unwrap();
    assert!(read_block_cache(&path, &other).is_err());
}

#[test]
fn unreadable_training_data_fails_in_step_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.svm");
    std::fs::write(&path, "+1 1:0.5\n-1 2:abc\n").unwrap();
    let cfg = TrainConfig::new(HyperParams::new(1.0, 1.0).unwrap(), 1, 1);
    match train_files(&path, None, &cfg) {
        Err(Error::Step { step: 1, source }) => assert!(matches!(*source, Error::Parse { line: 2, .. })),
        other => panic!("unexpected {other:?}"),
    }
}
