//! Exercise the C ABI end to end: generate a corpus, train through
//! `synre_train`, then load and score through the handle API.

use std::ffi::{CStr, CString};

use synre::corpus::save_corpus;
use synre::synth::{generate_synthetic, SynthConfig};
use synre_ffi::*;

fn cstring(path: &std::path::Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn train_load_predict_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SynthConfig {
        n_relations: 3,
        n_entity_pairs: 30,
        n_test_pairs: Some(6),
        bag_size_range: [1, 3],
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let corpus = dir.path().join("train.jsonl");
    let test_corpus = dir.path().join("test.jsonl");
    save_corpus(&data.train, &corpus).unwrap();
    save_corpus(&data.test, &test_corpus).unwrap();
    let relations = dir.path().join("relations.txt");
    synre::corpus::save_relations(&data.train.relation_names, &relations).unwrap();

    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "batch_size": 10,
            "d_word": 6,
            "d_dep": 4,
            "d_pos": 2,
            "filters": 4,
            "hidden": 4,
            "epochs": 1,
            "position_clip": 8,
            "strategy": "trans"
        })
        .to_string(),
    )
    .unwrap();

    let out_dir = dir.path().join("model");
    let code = unsafe {
        synre_train(
            cstring(&corpus).as_ptr(),
            cstring(&relations).as_ptr(),
            cstring(&config).as_ptr(),
            CString::new("trans").unwrap().as_ptr(),
            7,
            cstring(&out_dir).as_ptr(),
        )
    };
    assert_eq!(code, SYNRE_OK, "{:?}", unsafe {
        CStr::from_ptr(synre_last_error())
    });

    let ckpt = cstring(&out_dir.join("model.ckpt"));
    let mut model: *mut SynreModel = std::ptr::null_mut();
    assert_eq!(unsafe { synre_model_load(ckpt.as_ptr(), &mut model) }, SYNRE_OK);
    assert!(!model.is_null());
    let n_rel = unsafe { synre_model_num_relations(model) };
    assert_eq!(n_rel, 3);

    let mut buf = [0i8; 64];
    let written =
        unsafe { synre_model_relation_name(model, 0, buf.as_mut_ptr() as *mut _, buf.len()) };
    assert!(written > 0);
    let name = unsafe { CStr::from_ptr(buf.as_ptr() as *const _) };
    assert_eq!(name.to_str().unwrap(), "NA");

    let corpus_c = cstring(&test_corpus);
    let relations_c = cstring(&relations);
    let mut dataset: *mut SynreDataset = std::ptr::null_mut();
    assert_eq!(
        unsafe { synre_dataset_load(corpus_c.as_ptr(), relations_c.as_ptr(), &mut dataset) },
        SYNRE_OK
    );
    let n_bags = unsafe { synre_dataset_num_bags(dataset) };
    assert_eq!(n_bags, 6);

    let mut probs = vec![0.0f64; n_rel as usize];
    for bag in 0..n_bags as usize {
        let code = unsafe { synre_predict_bag(model, dataset, bag, probs.as_mut_ptr(), probs.len()) };
        assert_eq!(code, SYNRE_OK);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "bag {bag}: probabilities sum {sum}");
    }

    // wrong buffer length is a usage error, not a crash
    let code = unsafe { synre_predict_bag(model, dataset, 0, probs.as_mut_ptr(), 1) };
    assert_eq!(code, SYNRE_ERR_USAGE);

    unsafe {
        synre_dataset_free(dataset);
        synre_model_free(model);
    }
}

#[test]
fn discover_mode_dataset_load() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SynthConfig {
        n_relations: 3,
        n_entity_pairs: 9,
        bag_size_range: [1, 2],
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let corpus = dir.path().join("c.jsonl");
    save_corpus(&data.train, &corpus).unwrap();

    let corpus_c = cstring(&corpus);
    let mut dataset: *mut SynreDataset = std::ptr::null_mut();
    assert_eq!(
        unsafe { synre_dataset_load(corpus_c.as_ptr(), std::ptr::null(), &mut dataset) },
        SYNRE_OK
    );
    assert_eq!(unsafe { synre_dataset_num_bags(dataset) }, 9);
    unsafe { synre_dataset_free(dataset) };
}
