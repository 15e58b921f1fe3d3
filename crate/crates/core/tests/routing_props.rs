use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use mmtb_core::routing::{
    build_prompt, effective_schema, route_tools, scan_modalities, DEFAULT_SCAN_DEPTH,
};
use mmtb_core::{HarnessVariant, Modality, ToolName};
use proptest::prelude::*;

const EXTS: &[&str] = &[
    "png", "JPG", "jpeg", "gif", "WebP", "wav", "MP3", "ogg", "flac", "aac", "m4a", "mp4", "webm",
    "AVI", "mov", "mkv", "txt", "srt", "json", "py", "tar", "",
];

/// Independent walker: plain read_dir recursion, no walkdir.
fn oracle_scan(root: &Path, max_depth: usize) -> BTreeSet<Modality> {
    fn walk(dir: &Path, depth: usize, max: usize, out: &mut BTreeSet<Modality>) {
        for entry in fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let meta = fs::symlink_metadata(entry.path()).unwrap();
            if meta.file_type().is_symlink() {
                continue;
            }
            if meta.is_dir() {
                if depth < max {
                    walk(&entry.path(), depth + 1, max, out);
                }
                continue;
            }
            let name = entry.file_name().to_string_lossy().to_lowercase();
            let Some((_, ext)) = name.rsplit_once('.') else {
                continue;
            };
            let m = match ext {
                "png" | "jpg" | "jpeg" | "gif" | "webp" => Modality::Image,
                "wav" | "mp3" | "ogg" | "flac" | "aac" | "m4a" => Modality::Audio,
                "mp4" | "webm" | "avi" | "mov" | "mkv" => Modality::Video,
                _ => continue,
            };
            out.insert(m);
        }
    }
    let mut out = BTreeSet::new();
    walk(root, 1, max_depth, &mut out);
    out
}

/// Keep rules written out by hand for every subset.
fn truth_table() -> Vec<(Vec<Modality>, Vec<ToolName>)> {
    use Modality::*;
    use ToolName::*;
    vec![
        (vec![], vec![]),
        (vec![Image], vec![ViewImage]),
        (vec![Audio], vec![ViewImage, ListenAudio]),
        (vec![Video], vec![ViewImage, WatchVideo]),
        (vec![Image, Audio], vec![ViewImage, ListenAudio]),
        (vec![Image, Video], vec![ViewImage, WatchVideo]),
        (vec![Audio, Video], vec![ViewImage, ListenAudio, WatchVideo]),
        (
            vec![Image, Audio, Video],
            vec![ViewImage, ListenAudio, WatchVideo],
        ),
    ]
}

#[test]
fn route_tools_matches_hand_table() {
    for (mods, extra) in truth_table() {
        let got = route_tools(&mods.iter().copied().collect());
        let mut want: BTreeSet<ToolName> =
            [ToolName::ExecuteCommands, ToolName::TaskComplete].into();
        want.extend(extra);
        assert_eq!(got, want, "modalities {mods:?}");
    }
}

#[derive(Debug, Clone)]
struct FileSpec {
    dirs: Vec<u8>,
    stem: u8,
    ext: usize,
    hidden: bool,
    bytes: u8,
}

fn file_spec() -> impl Strategy<Value = FileSpec> {
    (
        prop::collection::vec(0u8..3, 0..8),
        any::<u8>(),
        0..EXTS.len(),
        any::<bool>(),
        any::<u8>(),
    )
        .prop_map(|(dirs, stem, ext, hidden, bytes)| FileSpec {
            dirs,
            stem,
            ext,
            hidden,
            bytes,
        })
}

fn materialize(root: &Path, files: &[FileSpec], links: &[(usize, usize)]) {
    let mut made = Vec::new();
    for f in files {
        let mut p = root.to_path_buf();
        for d in &f.dirs {
            p.push(format!("d{d}"));
        }
        fs::create_dir_all(&p).unwrap();
        let ext = EXTS[f.ext];
        let name = format!(
            "{}f{}{}{}",
            if f.hidden { "." } else { "" },
            f.stem,
            if ext.is_empty() { "" } else { "." },
            ext
        );
        p.push(name);
        fs::write(&p, vec![f.bytes; f.bytes as usize % 7]).unwrap();
        made.push(p);
    }
    #[cfg(unix)]
    for (i, (target, ext)) in links.iter().enumerate() {
        if made.is_empty() {
            break;
        }
        let target = &made[target % made.len()];
        let link = root.join(format!("link{i}.{}", ["mp4", "wav", "png"][ext % 3]));
        let _ = std::os::unix::fs::symlink(target, link);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scan_matches_brute_force(
        files in prop::collection::vec(file_spec(), 0..24),
        links in prop::collection::vec((any::<usize>(), any::<usize>()), 0..3),
        depth in 1usize..9,
    ) {
        let dir = tempfile::tempdir().unwrap();
        materialize(dir.path(), &files, &links);
        prop_assert_eq!(scan_modalities(dir.path(), depth).unwrap(), oracle_scan(dir.path(), depth));
    }

    #[test]
    fn mm_schema_is_route_of_scan(files in prop::collection::vec(file_spec(), 0..24)) {
        let dir = tempfile::tempdir().unwrap();
        materialize(dir.path(), &files, &[]);
        let schema = effective_schema(HarnessVariant::MM, dir.path()).unwrap();
        let want = route_tools(&scan_modalities(dir.path(), DEFAULT_SCAN_DEPTH).unwrap());
        prop_assert_eq!(schema.names(), want);
        let perception = schema.names().iter().filter(|t| t.is_perception()).count();
        prop_assert!(perception <= 3);
    }

    #[test]
    fn mm_schema_ignores_contents_and_names(
        files in prop::collection::vec(file_spec(), 0..16),
        salt in 1u8..200,
    ) {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        materialize(a.path(), &files, &[]);
        let renamed: Vec<FileSpec> = files
            .iter()
            .map(|f| FileSpec { stem: f.stem.wrapping_add(salt), bytes: f.bytes.wrapping_mul(3).wrapping_add(salt), ..f.clone() })
            .collect();
        materialize(b.path(), &renamed, &[]);
        prop_assert_eq!(
            effective_schema(HarnessVariant::MM, a.path()).unwrap(),
            effective_schema(HarnessVariant::MM, b.path()).unwrap()
        );
    }

    #[test]
    fn static_variants_ignore_workspace(files in prop::collection::vec(file_spec(), 0..16)) {
        let dir = tempfile::tempdir().unwrap();
        materialize(dir.path(), &files, &[]);
        let empty = tempfile::tempdir().unwrap();
        for v in HarnessVariant::ALL.into_iter().filter(|v| *v != HarnessVariant::MM) {
            prop_assert_eq!(
                effective_schema(v, dir.path()).unwrap(),
                effective_schema(v, empty.path()).unwrap()
            );
        }
    }

    #[test]
    fn instruction_appears_once(instruction in "[A-Za-z0-9 .,]{1,80}") {
        let dir = tempfile::tempdir().unwrap();
        let marked = format!("<<{instruction}>>");
        for v in HarnessVariant::ALL {
            let schema = effective_schema(v, dir.path()).unwrap();
            let p = build_prompt(v, &schema, &marked, "$ ");
            prop_assert_eq!(p.matches(&marked).count(), 1);
        }
    }
}

#[test]
fn mm_prompt_lists_all_tools_even_when_masked() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let masked = effective_schema(HarnessVariant::MM, dir.path()).unwrap();
    assert_eq!(masked.names().len(), 2);
    let full = effective_schema(HarnessVariant::MmUnmasked, dir.path()).unwrap();
    assert_eq!(
        build_prompt(HarnessVariant::MM, &masked, "do it", "$ "),
        build_prompt(HarnessVariant::MmUnmasked, &full, "do it", "$ ")
    );
}
