use std::fs;

use hazenet::haze::{synthesize_haze, transmittance_from_depth, Airlight, ScatteringCoefficient};
use hazenet::image::{read_gray, read_image, write_gray, write_image, GrayMap, RgbImage};
use hazenet::nn::{load_model, save_model, train, NetworkParams, TrainConfig};
use hazenet::pipeline::{dehaze, DehazeConfig};
use hazenet::procedural;
use hazenet::synth::{build_training_set, load_manifest, read_training_set, write_training_set, SynthConfig};
use hazenet::Error;
use tempfile::TempDir;

#[test]
fn image_files_roundtrip_within_quantization() {
    let dir = TempDir::new().unwrap();
    let img = procedural::scene(17, 23, 3).image;
    for name in ["a.png", "a.ppm"] {
        let path = dir.path().join(name);
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.dims(), (17, 23));
        for (x, y) in img.data().iter().zip(back.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    let depth = procedural::scene(17, 23, 3).depth;
    for name in ["d.png", "d.pgm"] {
        let path = dir.path().join(name);
        write_gray(&depth, &path).unwrap();
        let back = read_gray(&path).unwrap();
        for (x, y) in depth.data().iter().zip(back.data()) {
            assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn file_errors_are_classified() {
    let dir = TempDir::new().unwrap();
    let img = RgbImage::filled(4, 4, [0.5; 3]);
    assert!(matches!(write_image(&img, dir.path().join("x.jpg")), Err(Error::UnsupportedFormat { .. })));
    assert!(matches!(read_image(dir.path().join("missing.png")), Err(Error::Unreadable { .. })));
    let bad = dir.path().join("bad.png");
    fs::write(&bad, b"\x89PNG\r\n\x1a\nthis is not a png body").unwrap();
    assert!(matches!(read_image(&bad), Err(Error::CorruptFile { .. })));
    assert!(matches!(load_model(&bad), Err(Error::UnsupportedFormat { .. })));
}

#[test]
fn manifest_to_model_to_dehaze() {
    let dir = TempDir::new().unwrap();
    let mut manifest = String::from("# two scenes, one with a validity mask\n");
    for i in 0..2 {
        let sc = procedural::scene(36, 40, 20 + i);
        write_image(&sc.image, dir.path().join(format!("i{i}.png"))).unwrap();
        write_gray(&sc.depth, dir.path().join(format!("d{i}.png"))).unwrap();
        manifest.push_str(&format!("i{i}.png d{i}.png"));
        if i == 1 {
            let mask = GrayMap::from_fn(36, 40, |y, _| if y < 4 { 0.0 } else { 1.0 });
            write_gray(&mask, dir.path().join("m1.png")).unwrap();
            manifest.push_str(" m1.png");
        }
        manifest.push('\n');
    }
    fs::write(dir.path().join("list.txt"), manifest).unwrap();

    let dataset = load_manifest(dir.path().join("list.txt")).unwrap();
    assert_eq!(dataset.items.len(), 2);
    let (patches, stats) = build_training_set(&dataset, &SynthConfig::default()).unwrap();
    assert!(!patches.is_empty());
    assert_eq!(stats.kept, patches.len());

    let set_path = dir.path().join("set.bin");
    write_training_set(&patches, &set_path).unwrap();
    let patches = read_training_set(&set_path).unwrap();

    let mut params = NetworkParams::init(9);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let report = train(&mut params, &patches, &config).unwrap();
    assert_eq!(report.epoch_losses.len(), 2);
    let model = dir.path().join("model.bin");
    save_model(&params, &model).unwrap();
    let loaded = load_model(&model).unwrap();
    assert_eq!(loaded, params);

    let sc = procedural::scene(30, 33, 99);
    let t = transmittance_from_depth(&sc.depth, ScatteringCoefficient::new(0.7).unwrap()).unwrap();
    let hazy = synthesize_haze(&sc.image, &t, Airlight::gray(0.9).unwrap()).unwrap();
    let a = dehaze(&hazy, &params, &DehazeConfig::default()).unwrap();
    let b = dehaze(&hazy, &loaded, &DehazeConfig::default()).unwrap();
    assert_eq!(a.radiance, b.radiance);
    assert_eq!(a.radiance.dims(), hazy.dims());
    assert!(a.transmittance.as_map().data().iter().all(|t| (0.0..=1.0).contains(t)));
}

#[test]
fn manifest_errors() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("list.txt");
    fs::write(&path, "only-one-field.png\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::CorruptFile { .. })));
    fs::write(&path, "a.png b.png\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Unreadable { .. })));

    write_image(&RgbImage::filled(8, 8, [0.5; 3]), dir.path().join("a.png")).unwrap();
    write_gray(&GrayMap::filled(8, 9, 0.5), dir.path().join("b.png")).unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::DimensionMismatch { .. })));
}
