use std::fs;

use cinemotion::deformation::DeformationField;
use cinemotion::image::{Image, ImageSequence, LabelMask};
use cinemotion::seqio::{
    self, decode_mseq, encode_mseq, export_figures, mask_path, read_masks, read_mseq, volume_csv, write_masks,
    write_mseq, FigureSet, MetricsTable, FLAG_HAS_MASK, HEADER_LEN,
};
use cinemotion::synthetic::{generate_dataset, read_manifest};
use cinemotion::Error;

fn ramp(t: usize) -> ImageSequence<f32> {
    let frames = (0..=t)
        .map(|k| Image::from_fn(4, 5, |y, x| (k * 100 + y * 5 + x) as f32 * 0.25))
        .collect();
    ImageSequence::new(frames, 1.25).unwrap()
}

#[test]
fn mseq_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.mseq");
    let seq = ramp(3);
    write_mseq(&seq, &p).unwrap();
    assert_eq!(read_mseq(&p).unwrap(), seq);
    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[..6], b"MSEQ1\0");
    assert_eq!(bytes.len(), HEADER_LEN + 4 * 4 * 5 * 4);
}

#[test]
fn truncated_file_names_path_and_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("short.mseq");
    let mut bytes = encode_mseq(&ramp(2), 0);
    bytes.truncate(bytes.len() - 3);
    fs::write(&p, &bytes).unwrap();
    let err = read_mseq(&p).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Format { .. }), "{msg}");
    assert!(msg.contains("short.mseq"), "{msg}");
    assert!(msg.contains(&format!("got {}", bytes.len())), "{msg}");

    let err = decode_mseq(&bytes[..10], &p).unwrap_err().to_string();
    assert!(err.contains("header"), "{err}");
}

#[test]
fn wrong_magic_is_rejected() {
    let mut bytes = encode_mseq(&ramp(1), 0);
    bytes[0] = b'X';
    let err = decode_mseq(&bytes, std::path::Path::new("x.mseq")).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let err = read_mseq(std::path::Path::new("/nonexistent/nothing.mseq")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn mask_flag_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.mseq");
    let masks: Vec<_> = (0..3).map(|k| LabelMask::from_fn(4, 5, |y, x| (x + y + k) % 2 == 0)).collect();
    write_masks(&masks, &mask_path(&p)).unwrap();
    write_mseq(&ramp(2), &p).unwrap();
    let (_, flags) = decode_mseq(&fs::read(&p).unwrap(), &p).unwrap();
    assert_eq!(flags & FLAG_HAS_MASK, FLAG_HAS_MASK);
    assert_eq!(read_masks(&mask_path(&p)).unwrap(), masks);

    let q = dir.path().join("c.mseq");
    write_mseq(&ramp(2), &q).unwrap();
    assert_eq!(decode_mseq(&fs::read(&q).unwrap(), &q).unwrap().1, 0);
}

#[test]
fn generated_dataset_is_readable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(3, 2, 32, 32, (5, 7), 4, dir.path()).unwrap();
    let plan = read_manifest(&manifest.path, 32, 32).unwrap();
    assert_eq!((plan.train.len(), plan.test.len()), (3, 2));
    for (item, file) in plan.train.iter().chain(&plan.test).zip(manifest.train.iter().chain(&manifest.test)) {
        let seq = read_mseq(file).unwrap();
        let masks = read_masks(&mask_path(file)).unwrap();
        assert_eq!(masks.len(), seq.frames.len());
        assert_eq!(seq.len_t(), item.t);
        // regenerating from the manifest gives the stored frames
        assert_eq!(plan.render(item).unwrap().sequence, seq);
    }
}

#[test]
fn figures_and_csv_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let seq = ramp(2);
    let defs = vec![DeformationField::<f32>::identity(4, 5); 2];
    let curve = [10.0, 9.5, 9.0];
    let table = MetricsTable {
        columns: vec!["t".into(), "rmse".into()],
        rows: vec![vec![1.0, 0.5], vec![2.0, 0.25]],
    };
    let written = export_figures(
        &FigureSet {
            sequence: &seq,
            deformations: &defs,
            volume_curve: Some(&curve),
            metrics: Some(&table),
        },
        dir.path(),
    )
    .unwrap();
    assert_eq!(written.len(), 2 + 3 + 3 * 2);
    let pgm = fs::read(dir.path().join("detj_001.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n5 4\n255\n"));
    // identity → det 1 → mid gray everywhere
    assert!(pgm[11..].iter().all(|&g| g == 128));
    let csv = fs::read_to_string(dir.path().join("volume.csv")).unwrap();
    assert_eq!(csv, volume_csv(&curve));
    assert!(csv.starts_with("t,volume_mm2\n0,10"));
    assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), "t,rmse\n1,0.5\n2,0.25\n");
    assert_eq!(seqio::image_to_gray(&seq.frames[0])[0], 0);
}
