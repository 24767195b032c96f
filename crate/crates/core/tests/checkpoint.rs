mod common;

use dest_core::pipeline::StreamMask;
use dest_core::run;
use dest_core::train::checkpoint::CHECKPOINT_MAGIC;
use dest_core::train::Checkpoint;
use dest_core::Error;

fn finetuned() -> Checkpoint {
    let cfg = common::small_run();
    let world = run::world(&cfg).unwrap();
    let qa = run::qa_splits(&cfg, &world).unwrap();
    run::finetune_run(&cfg, None, &qa.train, StreamMask::BOTH).unwrap().0
}

#[test]
fn save_load_keeps_everything() {
    let ck = finetuned();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dstc");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.header, ck.header);
    assert_eq!(back.optim, ck.optim);
    assert_eq!(back.model.params.len(), ck.model.params.len());
    for i in 0..ck.model.params.len() {
        let id = dest_core::numeric::ParamId(i);
        assert_eq!(back.model.params.value(id), ck.model.params.value(id));
    }
    assert_eq!(back.to_bytes(), ck.to_bytes());
}

#[test]
fn file_starts_with_magic() {
    let bytes = finetuned().to_bytes();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn damaged_files_are_format_errors() {
    let bytes = finetuned().to_bytes();
    let mut wrong = bytes.clone();
    wrong[1] = 0;
    assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Format { offset: 0, .. })));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format { offset: 4, .. })));
    for cut in [0, 6, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
    }
}

#[test]
fn pretraining_checkpoint_without_optimizer_cannot_resume() {
    let cfg = common::small_run();
    let world = run::world(&cfg).unwrap();
    let trm = run::trm_splits(&cfg, &world).unwrap();
    let (mut ck, _) = run::pretrain_until(&cfg, &trm.train, 3).unwrap();
    ck.optim = None;
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert!(back.optim.is_none());
    assert!(matches!(run::resume_pretrain(back, &trm.train, 6), Err(Error::Argument(_))));
}
