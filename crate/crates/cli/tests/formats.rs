use hodinet::checkpoint::{Checkpoint, CheckpointError};
use hodinet::images::{to_gray, to_tensor};
use hodinet::netpbm::{decode, encode, Image, NetpbmError};
use hodinet::CliError;
use hodinet_core::{Model, ModelConfig, Tensor};
use proptest::prelude::*;

#[test]
fn four_pixel_gray_file() {
    let bytes = b"P5\n4 1\n255\n\x00\xff\x80\x40";
    let img = decode(bytes).unwrap();
    let t = to_tensor(&img);
    assert_eq!(t.shape().0, [1, 1, 1, 4]);
    let want = [0.0, 1.0, 0.50196, 0.25098];
    for (a, b) in t.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn truncated_files_report_the_end_offset() {
    let full = encode(&Image::rgb(3, 2, (0..18).collect()));
    for cut in [full.len() - 1, full.len() - 7, 12] {
        match decode(&full[..cut]) {
            Err(NetpbmError::Truncated { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
}

#[test]
fn sixteen_bit_files_are_rejected() {
    let err = decode(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap_err();
    assert_eq!(err, NetpbmError::UnsupportedMaxval(65535));
    assert!(err.to_string().contains("65535"));
}

#[test]
fn half_probability_saves_as_128() {
    let t = Tensor::full([1, 1, 2, 3], 0.5);
    let img = to_gray(&t);
    assert_eq!((img.width, img.height), (3, 2));
    assert!(img.data.iter().all(|b| *b == 128));
}

#[test]
fn load_rejects_wrong_kind() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.pgm");
    std::fs::write(&p, encode(&Image::gray(2, 2, vec![0; 4]))).unwrap();
    match hodinet::images::load_rgb(&p, None) {
        Err(CliError::Image {
            source: NetpbmError::WrongKind { .. },
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_restores_weights_to_float_precision() {
    let cfg = ModelConfig::toy((64, 64)).unwrap();
    let src = Model::new(cfg.clone(), 3).unwrap();
    let mut dst = Model::new(cfg, 4).unwrap();
    let ck = Checkpoint::from_bytes(&Checkpoint::from_store("x = 1".into(), &src.store).to_bytes()).unwrap();
    assert_eq!(ck.config, "x = 1");
    assert_eq!(ck.tensors.len(), src.store.len());
    ck.apply(&mut dst.store).unwrap();
    for (a, b) in src.store.entries().iter().zip(dst.store.entries()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert!((x - y).abs() <= f32::EPSILON as f64 * x.abs().max(1e-30), "{}", a.name);
        }
    }
}

#[test]
fn checkpoint_for_other_widths_lists_offending_tensors() {
    let small = Model::new(ModelConfig::toy((64, 64)).unwrap(), 0).unwrap();
    let mut cfg = ModelConfig::toy((64, 64)).unwrap();
    cfg.decoder_width = 16;
    let mut other = Model::new(cfg, 0).unwrap();
    let msg = Checkpoint::from_store(String::new(), &small.store)
        .apply(&mut other.store)
        .unwrap_err()
        .to_string();
    assert!(msg.contains("decoder"), "{msg}");
    assert!(!msg.contains("rgb."), "{msg}");
}

#[test]
fn damaged_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.ckpt");
    let model = Model::new(ModelConfig::toy((32, 32)).unwrap(), 0).unwrap();
    let mut bytes = Checkpoint::from_store(String::new(), &model.store).to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&p, &bytes).unwrap();
    match Checkpoint::load(&p) {
        Err(CliError::Checkpoint {
            source: CheckpointError::ChecksumMismatch,
            ..
        }) => {}
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing")),
        Err(CliError::Io { .. })
    ));
}

fn image() -> impl Strategy<Value = Image> {
    (1usize..9, 1usize..9, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, c)| {
        proptest::collection::vec(any::<u8>(), w * h * c).prop_map(move |data| Image {
            width: w,
            height: h,
            channels: c,
            data,
        })
    })
}

proptest! {
    #[test]
    fn encode_decode_round_trip(img in image()) {
        prop_assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn bytes_survive_the_tensor_round_trip(img in image()) {
        prop_assume!(img.channels == 1);
        prop_assert_eq!(to_gray(&to_tensor(&img)), img);
    }

    #[test]
    fn saved_maps_are_within_half_a_level(v in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
        let t = Tensor::new([1, 1, 1, v.len()], v.clone()).unwrap();
        let back = to_tensor(&to_gray(&t));
        for (a, b) in back.data().iter().zip(&v) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode(&bytes);
        let _ = Checkpoint::from_bytes(&bytes);
    }

    #[test]
    fn header_prefixes_give_located_errors(cut in 0usize..11) {
        let full = encode(&Image::gray(2, 2, vec![1, 2, 3, 4]));
        // a cut inside "255" leaves a complete but different maxval
        match decode(&full[..cut]).unwrap_err() {
            NetpbmError::UnsupportedMaxval(v) => prop_assert!(v == 2 || v == 25),
            err => prop_assert!(err.offset().is_some_and(|o| o <= cut), "{:?}", err),
        }
    }
}
