use std::sync::Arc;

use proptest::prelude::*;

use spherewarp_cli::config::{config_hash, RunConfig};
use spherewarp_cli::format::{
    decode_map, decode_weights, encode_map, encode_weights, map_from_matrix, parse_text_matrix, read_map, write_map,
    FormatError, GridMap, MapKind, WeightsFile, MAP_HEADER_LEN,
};
use spherewarp_cli::Category;
use spherewarp_core::{DeformationField, FeatureMap, LabelMap, SphereGrid, VelocityField};
use spherewarp_registration::build_unet;

fn grid(m: usize, n: usize) -> Arc<SphereGrid> {
    Arc::new(SphereGrid::new(m, n).unwrap())
}

fn f32_values(n: usize, seed: u64) -> Vec<f64> {
    (0..n).map(|k| ((k as f64 * 0.37 + seed as f64).sin() * 3.0) as f32 as f64).collect()
}

fn sample_feature() -> GridMap {
    let g = grid(4, 8);
    GridMap::Feature(FeatureMap::new(g.clone(), 1, f32_values(g.len(), 1)).unwrap())
}

fn arb_grid() -> impl Strategy<Value = Arc<SphereGrid>> {
    (1usize..6, 1usize..6).prop_map(|(m, n)| grid(2 * m, 4 * n))
}

fn arb_f32(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), len)
        .prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn arb_map() -> impl Strategy<Value = GridMap> {
    (arb_grid(), 0u8..5, 1usize..4).prop_flat_map(|(g, kind, channels)| {
        let n = g.len();
        match kind {
            0 => arb_f32(channels * n).prop_map(move |v| GridMap::Feature(FeatureMap::new(g.clone(), channels, v).unwrap())).boxed(),
            1 => prop::collection::vec(any::<u32>(), n)
                .prop_map(move |v| GridMap::Label(LabelMap::new(g.clone(), v).unwrap()))
                .boxed(),
            2 => arb_f32(2 * n)
                .prop_map(move |mut v| {
                    let p = v.split_off(n);
                    GridMap::Velocity(VelocityField::new(g.clone(), v, p).unwrap())
                })
                .boxed(),
            3 => arb_f32(2 * n)
                .prop_map(move |mut v| {
                    let p = v.split_off(n);
                    GridMap::Deformation(DeformationField::new(g.clone(), v, p).unwrap())
                })
                .boxed(),
            _ => arb_f32(channels * n)
                .prop_map(move |v| {
                    let v = v.into_iter().map(f64::abs).collect();
                    GridMap::Variance(FeatureMap::new(g.clone(), channels, v).unwrap())
                })
                .boxed(),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn map_round_trip_is_bit_exact(map in arb_map()) {
        let bytes = encode_map(&map).unwrap();
        let back = decode_map(&bytes).unwrap();
        prop_assert_eq!(&back, &map);
        prop_assert_eq!(encode_map(&back).unwrap(), bytes);
    }

    #[test]
    fn any_single_payload_byte_flip_is_caught(map in arb_map(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_map(&map).unwrap();
        let payload_len = bytes.len() - MAP_HEADER_LEN - 4;
        let k = MAP_HEADER_LEN + pos.index(payload_len);
        bytes[k] ^= 1 << bit;
        let crc_error = matches!(decode_map(&bytes), Err(FormatError::Crc { .. }));
        prop_assert!(crc_error);
    }
}

#[test]
fn f64_values_are_rounded_to_f32_once() {
    let g = grid(2, 4);
    let m = GridMap::Feature(FeatureMap::new(g.clone(), 1, vec![0.1; g.len()]).unwrap());
    let once = encode_map(&m).unwrap();
    let back = decode_map(&once).unwrap();
    assert_eq!(encode_map(&back).unwrap(), once);
    match back {
        GridMap::Feature(f) => assert!(f.data().iter().all(|v| *v == 0.1f32 as f64)),
        _ => panic!("kind changed"),
    }
}

#[test]
fn header_channel_count_disagreeing_with_payload_is_a_shape_error() {
    let mut bytes = encode_map(&sample_feature()).unwrap();
    bytes[7..9].copy_from_slice(&2u16.to_le_bytes());
    assert!(matches!(decode_map(&bytes), Err(FormatError::Shape(_))));
}

#[test]
fn header_errors_are_distinguished() {
    let good = encode_map(&sample_feature()).unwrap();
    let mut b = good.clone();
    b[0] = b'X';
    assert!(matches!(decode_map(&b), Err(FormatError::BadMagic { .. })));
    let mut b = good.clone();
    b[4..6].copy_from_slice(&7u16.to_le_bytes());
    assert!(matches!(decode_map(&b), Err(FormatError::UnsupportedVersion(7))));
    let mut b = good.clone();
    b[6] = 9;
    assert!(matches!(decode_map(&b), Err(FormatError::UnknownKind(9))));
    assert!(matches!(decode_map(&good[..good.len() - 3]), Err(FormatError::Truncated(_))));
    assert!(matches!(decode_map(&good[..10]), Err(FormatError::Truncated(_))));
    let mut b = good.clone();
    b.extend_from_slice(&[0; 4]);
    assert!(matches!(decode_map(&b), Err(FormatError::Shape(_))));
}

#[test]
fn velocity_and_deformation_need_two_channels() {
    let g = grid(2, 4);
    let f = GridMap::Feature(FeatureMap::new(g.clone(), 3, vec![0.0; 3 * g.len()]).unwrap());
    let mut b = encode_map(&f).unwrap();
    b[6] = MapKind::Velocity as u8;
    assert!(matches!(decode_map(&b), Err(FormatError::Shape(_))));
    b[6] = MapKind::Label as u8;
    assert!(matches!(decode_map(&b), Err(FormatError::Shape(_))));
}

#[test]
fn typed_accessors_reject_other_kinds() {
    let m = decode_map(&encode_map(&sample_feature()).unwrap()).unwrap();
    assert!(matches!(m.clone().into_velocity(), Err(FormatError::KindMismatch { .. })));
    assert!(matches!(m.clone().into_labels(), Err(FormatError::KindMismatch { .. })));
    assert!(m.into_feature().is_ok());
}

#[test]
fn non_finite_and_out_of_range_values_are_refused() {
    let g = grid(2, 4);
    let m = GridMap::Feature(FeatureMap::new(g.clone(), 1, vec![1e300; g.len()]).unwrap());
    assert!(matches!(encode_map(&m), Err(FormatError::Range(_))));
    let mut b = encode_map(&sample_feature()).unwrap();
    let nan = f32::NAN.to_le_bytes();
    b[MAP_HEADER_LEN..MAP_HEADER_LEN + 4].copy_from_slice(&nan);
    let n = b.len();
    let crc = reference_crc32(&b[MAP_HEADER_LEN..n - 4]);
    b[n - 4..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(decode_map(&b), Err(FormatError::Range(_))));
}

fn reference_crc32(bytes: &[u8]) -> u32 {
    // bitwise CRC-32 (IEEE, reflected), independent of the library
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0xedb8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

#[test]
fn stored_crc_matches_a_reference_crc32() {
    let b = encode_map(&sample_feature()).unwrap();
    let n = b.len();
    let stored = u32::from_le_bytes(b[n - 4..].try_into().unwrap());
    assert_eq!(stored, reference_crc32(&b[MAP_HEADER_LEN..n - 4]));
    assert_eq!(reference_crc32(b"123456789"), 0xcbf4_3926);
}

#[test]
fn header_layout_is_little_endian() {
    let b = encode_map(&sample_feature()).unwrap();
    assert_eq!(&b[..4], b"SMGM");
    assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
    assert_eq!(b[6], 0);
    assert_eq!(u16::from_le_bytes([b[7], b[8]]), 1);
    assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), 4);
    assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 8);
    assert_eq!(b.len(), MAP_HEADER_LEN + 32 * 4 + 4);
}

#[test]
fn files_round_trip_and_leave_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.smgm");
    let m = sample_feature();
    write_map(&m, &path).unwrap();
    write_map(&m, &path).unwrap();
    assert_eq!(read_map(&path).unwrap(), m);
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
    assert!(matches!(read_map(&dir.path().join("missing.smgm")), Err(FormatError::Io { .. })));
}

#[test]
fn weights_round_trip_exactly() {
    let g = grid(16, 32);
    let net = build_unet(g, 2, &[3, 4, 4, 5], 7).unwrap();
    let w = WeightsFile::from_model(&net);
    let bytes = encode_weights(&w).unwrap();
    let back = decode_weights(&bytes).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.to_model().unwrap().params(), net.params());
    let mut bad = bytes.clone();
    let k = bad.len() - 20;
    bad[k] ^= 0x10;
    assert!(matches!(decode_weights(&bad), Err(FormatError::Crc { .. })));
    assert!(matches!(decode_weights(&bytes[..bytes.len() - 9]), Err(FormatError::Truncated(_))));
    assert!(matches!(decode_map(&bytes), Err(FormatError::BadMagic { .. })));
}

#[test]
fn text_matrices_convert_to_maps() {
    let (m, n, v) = parse_text_matrix("# comment\n1 2 3 4\n\n5 6 7 8\n").unwrap();
    assert_eq!((m, n), (2, 4));
    assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    match map_from_matrix(MapKind::Label, m, n, v.clone()).unwrap() {
        GridMap::Label(l) => assert_eq!(l.get(1, 3), 8),
        _ => panic!("wrong kind"),
    }
    assert!(map_from_matrix(MapKind::Feature, m, n, v).is_ok());
    assert!(parse_text_matrix("1 2\n3\n").is_err());
    assert!(parse_text_matrix("1 x\n").is_err());
    assert!(parse_text_matrix("").is_err());
    assert!(map_from_matrix(MapKind::Label, 1, 2, vec![1.5, 2.0]).is_err());
    assert!(map_from_matrix(MapKind::Velocity, 1, 2, vec![1.0, 2.0]).is_err());
}

#[test]
fn run_config_rejects_unknown_keys_at_every_level() {
    let ok = RunConfig::parse(r#"{"registration": {"lambda": 100.0, "rigid": true}, "out": "x"}"#).unwrap();
    assert_eq!(ok.registration.lambda, 100.0);
    assert!(ok.registration.rigid);
    assert_eq!(ok.registration.iters, 500);
    for bad in [
        r#"{"registation": {}}"#,
        r#"{"registration": {"lamda": 1.0}}"#,
        r#"{"registration": {"lambda": -1.0}}"#,
        r#"{"registration": {"mode": "planar"}}"#,
        r#"{"widths": [1, 2]}"#,
        "not json",
    ] {
        let err = RunConfig::parse(bad).unwrap_err();
        assert_eq!(err.category, Category::Config, "{bad}");
    }
}

#[test]
fn config_hash_tracks_content() {
    let a = RunConfig::default();
    let mut b = a.clone();
    assert_eq!(config_hash(&a), config_hash(&b));
    assert_eq!(config_hash(&a).len(), 64);
    b.registration.lambda *= 2.0;
    assert_ne!(config_hash(&a), config_hash(&b));
}
