use camcal::camc::tail_classes;
use camcal::data::{make_longtailed, synth_shapes};
use camcal::eval::{self, confusion_csv, export_cam_heatmaps, CamRequest};
use camcal::train::{
    load_checkpoint, read_checkpoint, save_checkpoint, train_stage1, train_stage2, write_checkpoint,
};
use camcal::{
    Averaging, BackboneConfig, CamcVariant, LongTailedDataset, Split, SplitReport, SplitThresholds, Threshold,
    TrainConfig,
};

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        channels: vec![8, 16],
        pool_after: vec![true, false],
        ..BackboneConfig::default()
    }
}

fn tiny_set() -> LongTailedDataset {
    synth_shapes(10, &make_longtailed(40, 10, 10.0).unwrap(), 16, 4).unwrap()
}

fn stage1(ds: &LongTailedDataset) -> camcal::Checkpoint {
    let cfg = TrainConfig {
        epochs: 1,
        backbone: tiny_backbone(),
        ..TrainConfig::representation()
    };
    train_stage1(ds, None, &cfg).unwrap().checkpoint
}

fn stage2_config(camc: CamcVariant, tau: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        camc,
        tau: Threshold::Count(tau),
        k: 2,
        backbone: tiny_backbone(),
        ..TrainConfig::classifier()
    }
}

#[test]
fn stage_one_file_feeds_stage_two() {
    let ds = tiny_set();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    let s1 = stage1(&ds);
    write_checkpoint(&path, &s1).unwrap();
    let loaded = read_checkpoint(&path).unwrap();
    assert_eq!(loaded, s1);

    let out = train_stage2(&loaded, &ds, None, &stage2_config(CamcVariant::Camc, 20)).unwrap();
    let block = out.checkpoint.camc.as_ref().unwrap();
    assert_eq!(block.tail_classes(), tail_classes(ds.class_counts(), Threshold::Count(20)));
    // the backbone is carried over untouched
    assert_eq!(out.checkpoint.backbone, s1.backbone);
    let bytes = save_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(save_checkpoint(&load_checkpoint(&bytes).unwrap()).unwrap(), bytes);
}

fn with_manifest(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value, &mut Vec<u8>)) -> Vec<u8> {
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
    let mut blob = bytes[8 + len..].to_vec();
    edit(&mut manifest, &mut blob);
    let json = serde_json::to_vec(&manifest).unwrap();
    let mut out = (json.len() as u64).to_le_bytes().to_vec();
    out.extend(json);
    out.extend(blob);
    out
}

#[test]
fn unexpected_tensor_names_are_rejected() {
    let ckpt = stage1(&tiny_set());
    let bytes = save_checkpoint(&ckpt).unwrap();
    let extra = with_manifest(&bytes, |m, blob| {
        let end = m["blob_length"].as_u64().unwrap();
        m["tensors"].as_array_mut().unwrap().push(serde_json::json!({
            "name": "head.extra", "shape": [1], "offset": end, "length": 4
        }));
        m["blob_length"] = (end + 4).into();
        blob.extend_from_slice(&1.0f32.to_le_bytes());
    });
    let err = load_checkpoint(&extra).unwrap_err().to_string();
    assert!(err.contains("head.extra"), "{err}");

    let missing = with_manifest(&bytes, |m, blob| {
        let last = m["tensors"].as_array_mut().unwrap().pop().unwrap();
        let len = last["length"].as_u64().unwrap();
        let end = m["blob_length"].as_u64().unwrap() - len;
        m["blob_length"] = end.into();
        blob.truncate(end as usize);
    });
    assert!(load_checkpoint(&missing).is_err());

    let unknown_field = with_manifest(&bytes, |m, _| {
        m["comment"] = "hi".into();
    });
    assert!(load_checkpoint(&unknown_field).is_err());
}

#[test]
fn confusion_csv_oracle() {
    // true 0: predicted 0 three times, 1 once; true 1: predicted 1 four times
    let labels = [0, 0, 0, 0, 1, 1, 1, 1];
    let preds = [0, 1, 0, 0, 1, 1, 1, 1];
    let splits = [Split::Many, Split::Low];
    let r = eval::evaluate_predictions(&labels, &preds, &splits, Averaging::Instance).unwrap();
    assert_eq!(r.confusion, vec![vec![3, 1], vec![0, 4]]);
    assert_eq!(confusion_csv(&r), "class,0,1\n0,3,1\n1,0,4\n");
    assert_eq!(r.top1_all, 87.5);
    assert_eq!(r.top1_many, Some(75.0));
    assert_eq!(r.top1_low, Some(100.0));
    let same = SplitReport::from_confusion(r.confusion.clone(), splits.to_vec(), Averaging::Instance).unwrap();
    assert_eq!(same, r);
}

#[test]
fn heatmaps_are_reproducible() {
    let ds = tiny_set();
    let s1 = stage1(&ds);
    let model = train_stage2(&s1, &ds, None, &stage2_config(CamcVariant::Camc, 20)).unwrap().checkpoint;
    let test = synth_shapes(10, &[2; 10], 16, 8).unwrap();
    let requests: Vec<CamRequest<'_>> = (0..test.len())
        .filter(|&i| test.label(i) >= 7)
        .map(|i| CamRequest {
            image_id: format!("{i}"),
            image: test.image(i),
            class: test.label(i),
        })
        .collect();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files_a = export_cam_heatmaps(&model, &requests, a.path(), true).unwrap();
    let files_b = export_cam_heatmaps(&model, &requests, b.path(), true).unwrap();
    assert_eq!(files_a.len(), 4 * requests.len());
    for (x, y) in files_a.iter().zip(&files_b) {
        let (bx, by) = (std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        assert_eq!(bx, by, "{}", x.display());
        let header: &[u8] = if x.extension().unwrap() == "pgm" { b"P5\n16 16\n255\n" } else { b"P6\n16 16\n255\n" };
        assert!(bx.starts_with(header));
    }
}

#[test]
fn camcpp_stage_two_trains_and_scores() {
    let ds = tiny_set();
    let s1 = stage1(&ds);
    let cfg = TrainConfig {
        m: 2,
        ..stage2_config(CamcVariant::Camcpp, 20)
    };
    let out = train_stage2(&s1, &ds, None, &cfg).unwrap();
    let test = synth_shapes(10, &[2; 10], 16, 8).unwrap();
    let r = eval::evaluate(&out.checkpoint, &test, ds.class_counts(), SplitThresholds::default(), Averaging::Class)
        .unwrap();
    assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 20);
}
