use base64::Engine;
use ci_adapter::publish::{sha256_hex, BUNDLE_DIR, MANIFEST_FILE};
use ci_adapter::{publish_artifacts, AdapterError, Fetched};
use ci_protocol::api::{ArtifactContent, FileUpload};
use ci_protocol::{decode, ArtifactBundle, ArtifactFile, ArtifactId, RunId, Timestamp};

fn content(files: &[(&str, &[u8])]) -> ArtifactContent {
    let b64 = base64::engine::general_purpose::STANDARD;
    ArtifactContent {
        bundle: ArtifactBundle {
            artifact_id: ArtifactId::new(),
            run_id: RunId::new(),
            files: files
                .iter()
                .map(|(p, b)| ArtifactFile {
                    relative_path: p.to_string(),
                    byte_size: b.len() as u64,
                    digest: sha256_hex(b),
                })
                .collect(),
            created_at: Timestamp::now(),
            retention_days: 90,
            purged: false,
        },
        files: files
            .iter()
            .map(|(p, b)| FileUpload {
                relative_path: p.to_string(),
                content_b64: b64.encode(b),
            })
            .collect(),
    }
}

#[test]
fn writes_identical_bytes_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let c = content(&[("stdout.txt", b"A\x00\xffB"), ("out/sub/r.txt", b"r\n")]);
    let manifest = publish_artifacts(dir.path(), &Fetched::Content(c.clone())).unwrap();
    assert_eq!(manifest, dir.path().join(MANIFEST_FILE));
    assert_eq!(std::fs::read(dir.path().join(BUNDLE_DIR).join("stdout.txt")).unwrap(), b"A\x00\xffB");
    assert_eq!(std::fs::read(dir.path().join(BUNDLE_DIR).join("out/sub/r.txt")).unwrap(), b"r\n");
    let back: ArtifactBundle = decode(&std::fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(back, c.bundle);
}

#[test]
fn a_flipped_byte_is_a_digest_mismatch_and_nothing_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = content(&[("a.txt", b"fine"), ("stdout.txt", b"hello")]);
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut bytes = b64.decode(&c.files[1].content_b64).unwrap();
    bytes[0] ^= 0x01;
    c.files[1].content_b64 = b64.encode(&bytes);

    let err = publish_artifacts(dir.path(), &Fetched::Content(c)).unwrap_err();
    assert_eq!(err.code(), "digest_mismatch");
    assert!(matches!(&err, AdapterError::DigestMismatch { path, .. } if path == "stdout.txt"));
    assert!(!dir.path().join(BUNDLE_DIR).exists());
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}

#[test]
fn files_outside_the_metadata_or_directory_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = content(&[("a.txt", b"x")]);
    c.files.push(FileUpload {
        relative_path: "extra.txt".into(),
        content_b64: "eA==".into(),
    });
    assert_eq!(publish_artifacts(dir.path(), &Fetched::Content(c)).unwrap_err().code(), "digest_mismatch");

    let c = content(&[("../escape.txt", b"x")]);
    assert_eq!(publish_artifacts(dir.path(), &Fetched::Content(c)).unwrap_err().code(), "invalid_input");
    assert!(!dir.path().parent().unwrap().join("escape.txt").exists());
}

#[test]
fn purged_bundle_gives_a_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut bundle = content(&[("stdout.txt", b"gone")]).bundle;
    bundle.purged = true;
    let manifest = publish_artifacts(dir.path(), &Fetched::Purged(bundle.clone())).unwrap();
    let back: ArtifactBundle = decode(&std::fs::read(&manifest).unwrap()).unwrap();
    assert!(back.purged);
    assert_eq!(back.files, bundle.files);
    assert!(!dir.path().join(BUNDLE_DIR).exists());
}
