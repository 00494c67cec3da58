use std::collections::HashSet;
use std::fs;

use proptest::prelude::*;

use super::*;
use crate::error::{PgmError, PtsError};
use crate::geometry::{Point, NUM_LANDMARKS};

fn pts_text(n_lines: usize) -> String {
    let mut s = String::from("version: 1\nn_points: 68\n{\n");
    for i in 0..n_lines {
        s.push_str(&format!("{}.5 {}.25\n", i, 100 + i));
    }
    s.push_str("}\n");
    s
}

fn sample_shape(offset: f64) -> Shape {
    Shape::new(
        (0..NUM_LANDMARKS)
            .map(|i| Point::new(20.0 + offset + (i % 10) as f64 * 3.0, 15.0 + (i / 10) as f64 * 4.0))
            .collect(),
    )
    .unwrap()
}

#[test]
fn minimal_file_reads_back() {
    let s = parse_pts(&pts_text(68)).unwrap();
    assert_eq!(s.points().len(), 68);
    assert_eq!(s.points()[0], Point::new(0.5, 100.25));
    assert_eq!(s.points()[67], Point::new(67.5, 167.25));
}

#[test]
fn crlf_and_repeated_spaces_accepted() {
    let text = pts_text(68).replace('\n', "\r\n").replace(' ', "   ");
    let s = parse_pts(&text).unwrap();
    assert_eq!(s.points()[3], Point::new(3.5, 103.25));
}

#[test]
fn declared_count_other_than_68_rejected() {
    let text = pts_text(5).replace("n_points: 68", "n_points: 5");
    assert_eq!(parse_pts(&text), Err(PtsError::WrongCount { line: 2, found: 5 }));
}

#[test]
fn too_few_points_rejected() {
    assert_eq!(parse_pts(&pts_text(67)), Err(PtsError::WrongCount { line: 71, found: 67 }));
}

#[test]
fn missing_braces_rejected_with_lines() {
    let no_open = pts_text(68).replacen("{\n", "", 1);
    assert_eq!(parse_pts(&no_open), Err(PtsError::MissingBrace { line: 3, brace: '{' }));
    let no_close = pts_text(68).replace("}\n", "");
    assert_eq!(parse_pts(&no_close), Err(PtsError::MissingBrace { line: 72, brace: '}' }));
}

#[test]
fn non_numeric_token_rejected_with_line() {
    let text = pts_text(68).replace("10.5 110.25", "10.5 abc");
    assert_eq!(
        parse_pts(&text),
        Err(PtsError::BadNumber {
            line: 14,
            token: "abc".into()
        })
    );
    let nan = pts_text(68).replace("2.5 102.25", "nan 1");
    assert!(matches!(parse_pts(&nan), Err(PtsError::BadNumber { line: 6, .. })));
}

#[test]
fn malformed_header_and_trailing_content_rejected() {
    let text = pts_text(68).replace("version: 1", "verison: 1");
    assert!(matches!(parse_pts(&text), Err(PtsError::BadHeader { line: 1, .. })));
    let three = pts_text(68).replace("4.5 104.25", "4.5 104.25 7");
    assert_eq!(parse_pts(&three), Err(PtsError::BadPoint { line: 8 }));
    let trailing = pts_text(68) + "extra\n";
    assert_eq!(parse_pts(&trailing), Err(PtsError::TrailingContent { line: 73 }));
    assert!(parse_pts("").is_err());
}

#[test]
fn pgm_decodes_scaled_values() {
    let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
    let img = load_gray_image(bytes).unwrap();
    assert_eq!((img.width(), img.height()), (2, 2));
    assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
}

#[test]
fn pgm_header_comments_and_small_maxval() {
    let bytes = b"P5 # comment\n# another\n3 1 15\n\x00\x0f\x05";
    let img = load_gray_image(bytes).unwrap();
    assert_eq!(img.data(), &[0.0, 1.0, 5.0 / 15.0]);
}

#[test]
fn pgm_errors_are_distinct() {
    assert_eq!(load_gray_image(b"P2\n1 1\n255\n0").unwrap_err(), PgmError::BadMagic);
    assert_eq!(
        load_gray_image(b"P5\n2 2\n255\n\x00\x01\x02").unwrap_err(),
        PgmError::Truncated { expected: 4, found: 3 }
    );
    assert_eq!(load_gray_image(b"P5\n1 1\n65535\n\x00\x00").unwrap_err(), PgmError::MaxvalTooLarge(65535));
    assert!(matches!(load_gray_image(b"P5\nx 1\n255\n\x00").unwrap_err(), PgmError::BadHeader(_)));
}

fn write_pair(dir: &Path, stem: &str, shape: &Shape) {
    let img = GrayImage::from_fn(64, 48, |x, y| ((x + y) % 7) as f64 / 6.0);
    fs::write(dir.join(format!("{stem}.pgm")), encode_pgm(&img)).unwrap();
    fs::write(dir.join(format!("{stem}.pts")), format_pts(shape)).unwrap();
}

#[test]
fn loads_pairs_in_lexicographic_order() {
    let dir = tempfile::tempdir().unwrap();
    for (i, stem) in ["b", "c", "a"].iter().enumerate() {
        write_pair(dir.path(), stem, &sample_shape(i as f64));
    }
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let first = load_dataset(dir.path(), None, LoadMode::Strict).unwrap();
    let ids: Vec<_> = first.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert_eq!(first.report, LoadReport::default());
    assert_eq!(first.records[0].shape, sample_shape(2.0));
    assert!(first.records.iter().all(|r| r.shape.points().len() == 68 && r.bbox.is_none()));

    let second = load_dataset(dir.path(), None, LoadMode::Strict).unwrap();
    let again: Vec<_> = second.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, again);
}

#[test]
fn orphans_reported_or_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", &sample_shape(0.0));
    write_pair(dir.path(), "b", &sample_shape(1.0));
    fs::write(dir.path().join("c.pts"), format_pts(&sample_shape(2.0))).unwrap();

    let loaded = load_dataset(dir.path(), None, LoadMode::Lenient).unwrap();
    assert_eq!(loaded.records.len(), 2);
    assert_eq!(loaded.report.skipped.len(), 1);
    assert!(loaded.report.skipped[0].path.ends_with("c.pts"));

    let err = load_dataset(dir.path(), None, LoadMode::Strict).unwrap_err();
    assert!(err.to_string().contains("c.pts"), "{err}");
}

#[test]
fn unreadable_image_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", &sample_shape(0.0));
    write_pair(dir.path(), "b", &sample_shape(0.0));
    fs::write(dir.path().join("b.pgm"), b"P5\n10 10\n255\n\x00").unwrap();
    let loaded = load_dataset(dir.path(), None, LoadMode::Lenient).unwrap();
    assert_eq!(loaded.records.len(), 1);
    assert!(loaded.report.skipped[0].problem.contains("truncated"));
}

#[test]
fn manifest_boxes_attach_and_fallback_expands_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", &sample_shape(0.0));
    write_pair(dir.path(), "b", &sample_shape(0.0));
    let manifest = dir.path().join("boxes.txt");
    fs::write(&manifest, "# detector\na 10 12 30.5 28\n\n").unwrap();
    let loaded = load_dataset(dir.path(), Some(&manifest), LoadMode::Strict).unwrap();
    let a = &loaded.records[0];
    assert_eq!(a.bbox, Some(BoundingBox::new(10.0, 12.0, 30.5, 28.0).unwrap()));
    assert_eq!(a.training_box(), a.bbox.unwrap());

    let b = &loaded.records[1];
    assert!(b.bbox.is_none());
    let gt = b.shape.bounding_box();
    let fb = b.training_box();
    assert!((fb.width - 1.05 * gt.width).abs() < 1e-12);
    assert!((fb.height - 1.05 * gt.height).abs() < 1e-12);
    assert!((fb.center().x - gt.center().x).abs() < 1e-12);
}

#[test]
fn manifest_errors() {
    assert!(parse_bbox_manifest("a 1 2 3").is_err());
    assert!(parse_bbox_manifest("a 1 2 x 4").is_err());
    assert!(parse_bbox_manifest("a 1 2 0 4").is_err());
    assert!(parse_bbox_manifest("a 1 2 3 4\na 1 2 3 4").is_err());
    let b = BoundingBox::new(1.5, 2.0, 3.0, 4.25).unwrap();
    let text = format_bbox_manifest([("x", &b)]);
    assert_eq!(parse_bbox_manifest(&text).unwrap()["x"], b);
}

#[test]
fn far_out_of_frame_landmarks_warn_but_load() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", &sample_shape(500.0));
    let loaded = load_dataset(dir.path(), None, LoadMode::Strict).unwrap();
    assert_eq!(loaded.records.len(), 1);
    assert_eq!(loaded.report.warnings.len(), 1);
}

#[test]
fn split_sizes_and_errors() {
    let empty = split_validation((0..10).collect(), 0, 3).unwrap();
    assert!(empty.validation.is_empty());
    assert_eq!(empty.train.len(), 10);

    let s = split_validation((0..3148).collect::<Vec<u32>>(), 100, 7).unwrap();
    assert_eq!((s.validation.len(), s.train.len()), (100, 3048));
    assert!(s.test.is_empty());

    assert!(split_validation((0..5).collect::<Vec<u32>>(), 5, 0).is_err());
    assert!(split_validation(Vec::<u32>::new(), 0, 0).is_err());
}

#[test]
fn split_is_seeded() {
    let a = split_validation((0..50).collect::<Vec<u32>>(), 10, 42).unwrap();
    let b = split_validation((0..50).collect::<Vec<u32>>(), 10, 42).unwrap();
    let c = split_validation((0..50).collect::<Vec<u32>>(), 10, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.validation, c.validation);
}

proptest! {
    #[test]
    fn pts_round_trip(coords in prop::collection::vec(-1e4f64..1e4, 2 * NUM_LANDMARKS)) {
        let s = Shape::from_interleaved(&coords).unwrap();
        prop_assert_eq!(parse_pts(&format_pts(&s)).unwrap(), s);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::from_fn(w, h, |_, _| rng.random::<f64>());
        let back = load_gray_image(&encode_pgm(&img)).unwrap();
        prop_assert_eq!((back.width(), back.height()), (w, h));
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn split_is_a_disjoint_partition(count in 1usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = ((count as f64 * frac) as usize).min(count - 1);
        let s = split_validation((0..count).collect(), n, seed).unwrap();
        prop_assert_eq!(s.validation.len(), n);
        let all: HashSet<usize> = s.train.iter().chain(&s.validation).copied().collect();
        prop_assert_eq!(all.len(), count);
    }
}
