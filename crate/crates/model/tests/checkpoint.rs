mod common;

use c2r_model::checkpoint::{Checkpoint, CheckpointError, MAGIC};
use c2r_model::training::{train_stage1, Collect};
use common::{test_config, test_data};
use ndarray::Array4;

fn probe_outputs(ck: &Checkpoint) -> Vec<Array4<f32>> {
    let lat = ck.model.latent();
    let z: Vec<Array4<f32>> = (0..3)
        .map(|i| Array4::from_shape_fn((lat.frames, lat.height, lat.width, lat.channels), |(a, b, c, d)| {
            ((a + 2 * b + 3 * c + 5 * d + 7 * i) as f32 * 0.21).cos()
        }))
        .collect();
    let zr: Vec<_> = z.iter().collect();
    let text = ck.model.tokenize(&["a red circle moving right on a flat background"; 3]);
    ck.model.predict_velocity(&zr, &[0.1, 0.5, 0.9], &text, None).unwrap().0
}

fn trained() -> Checkpoint {
    let config = test_config(1);
    train_stage1(&config, &test_data(&config), &mut Collect::default()).unwrap()
}

#[test]
fn round_trip_preserves_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let mut ck = trained();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for (a, b) in probe_outputs(&ck).iter().zip(probe_outputs(&back)) {
        let err = (a - &b).iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(err <= 1e-6);
    }
    assert_eq!(back.weights_hash(), ck.weights_hash());
    assert_eq!(back.manifest, ck.manifest);
    assert_eq!(back.optimizer, ck.optimizer);
    assert_eq!(back.codec, ck.codec);
}

#[test]
fn corruption_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let mut ck = trained();
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Corrupt(_))));

    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Corrupt(_))));

    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Magic { .. })));

    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
    manifest["format_version"] = 99.into();
    let json = serde_json::to_vec(&manifest).unwrap();
    let mut out = MAGIC.to_vec();
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(&bytes[16 + mlen..]);
    std::fs::write(&path, out).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Version { found: 99 })));
}
