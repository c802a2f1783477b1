use kilosound::dsp::FrontEnd;
use kilosound::model::{Backbone, Checkpoint, CheckpointConfig, CheckpointKind, Classifier, MlpHead, ModelConfig};
use kilosound::Error;

fn small_checkpoint() -> Checkpoint {
    let classifier = Classifier::new(
        Backbone::new(ModelConfig::child(16, 1, 1), 1).unwrap(),
        MlpHead::new(16, 3, 2).unwrap(),
        FrontEnd::standard().settings().clone(),
    )
    .unwrap();
    classifier.to_checkpoint()
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = small_checkpoint().to_bytes().unwrap();
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "prefix of {cut} bytes accepted");
    }
}

#[test]
fn byte_flips_never_panic() {
    let bytes = small_checkpoint().to_bytes().unwrap();
    let mut flipped = 0;
    for pos in (0..bytes.len()).step_by(53) {
        let mut b = bytes.clone();
        b[pos] ^= 0xa5;
        match Checkpoint::from_bytes(&b) {
            Ok(ck) => {
                let _ = Classifier::from_checkpoint(&ck);
            }
            Err(Error::Format(_) | Error::Corrupt(_) | Error::Config(_) | Error::Json(_) | Error::Shape(_)) => flipped += 1,
            Err(e) => panic!("unexpected error kind at byte {pos}: {e:?}"),
        }
    }
    assert!(flipped > 0);
}

#[test]
fn wrong_magic_is_a_format_error() {
    let mut bytes = small_checkpoint().to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn restore_rejects_mismatched_shapes() {
    let ck = Checkpoint::capture(
        CheckpointConfig::new(CheckpointKind::Backbone, ModelConfig::child(16, 1, 1), FrontEnd::standard().settings().clone()),
        &[&Backbone::<f32>::new(ModelConfig::child(16, 1, 1), 3).unwrap()],
    );
    let mut wider = Backbone::<f32>::new(ModelConfig::child(32, 1, 1), 3).unwrap();
    assert!(matches!(ck.restore(&mut [&mut wider]), Err(Error::Config(_))));
}

#[test]
fn classifier_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.lstn");
    let ck = small_checkpoint();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    assert!(Classifier::from_checkpoint(&back).is_ok());
}
