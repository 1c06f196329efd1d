//! Line-oriented text format for skeleton sequences.
//!
//! ```text
//! SKEL1 T=<frames> V=<joints> C=<classes>
//! sample <id> label=<int> theme=<int>
//! <V*3 numbers>      (T lines, joint-major, xyz innermost)
//! ...
//! ```
//!
//! Numbers are written with the shortest representation that parses back
//! to the same `f64`, so a write/load round trip is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::DataError;
use crate::model::SkeletonSequence;

const MAGIC: &str = "SKEL1";

/// Header and samples of one skeleton file.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonFile {
    pub frames: usize,
    pub joints: usize,
    pub classes: usize,
    pub samples: Vec<SkeletonSequence>,
}

pub fn render_skeleton_file(
    frames: usize,
    joints: usize,
    classes: usize,
    samples: &[SkeletonSequence],
) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC} T={frames} V={joints} C={classes}").unwrap();
    for s in samples {
        assert_eq!((s.frames, s.joints), (frames, joints), "sample {} shape", s.id);
        writeln!(out, "sample {} label={} theme={}", s.id, s.label, s.theme).unwrap();
        for row in s.coords.chunks(joints * 3) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{v:?}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_skeleton_file(
    path: &Path,
    frames: usize,
    joints: usize,
    classes: usize,
    samples: &[SkeletonSequence],
) -> Result<(), DataError> {
    fs::write(path, render_skeleton_file(frames, joints, classes, samples)).map_err(|e| {
        DataError::Io {
            path: path.display().to_string(),
            source: e,
        }
    })
}

pub fn load_skeleton_file(path: &Path) -> Result<SkeletonFile, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_skeleton_file(&text)
}

fn header_field(token: Option<&str>, key: &str) -> Result<usize, DataError> {
    let token = token.ok_or_else(|| DataError::Header(format!("missing {key}=")))?;
    let value = token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| DataError::Header(format!("expected {key}=<int>, found `{token}`")))?;
    value
        .parse()
        .map_err(|_| DataError::Header(format!("{key} is not an integer: `{value}`")))
}

fn record_field(token: Option<&str>, key: &str, index: usize) -> Result<usize, DataError> {
    let bad = |reason: String| DataError::Record { index, reason };
    let token = token.ok_or_else(|| bad(format!("missing {key}=")))?;
    token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| bad(format!("expected {key}=<int>, found `{token}`")))?
        .parse()
        .map_err(|_| bad(format!("{key} is not an integer")))
}

pub fn parse_skeleton_file(text: &str) -> Result<SkeletonFile, DataError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Header("empty file".into()))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(DataError::Header(format!("expected `{MAGIC}` magic")));
    }
    let frames = header_field(tokens.next(), "T")?;
    let joints = header_field(tokens.next(), "V")?;
    let classes = header_field(tokens.next(), "C")?;
    if tokens.next().is_some() {
        return Err(DataError::Header("trailing tokens".into()));
    }
    if frames == 0 || joints == 0 || classes == 0 {
        return Err(DataError::Header("T, V and C must be positive".into()));
    }

    let width = joints * 3;
    let mut samples = Vec::new();
    while let Some(line) = lines.next() {
        let index = samples.len();
        let bad = |reason: String| DataError::Record { index, reason };
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some("sample") {
            return Err(bad(format!("expected `sample` line, found `{line}`")));
        }
        let id: u64 = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("missing or invalid sample id".into()))?;
        let label = record_field(tokens.next(), "label", index)?;
        let theme = record_field(tokens.next(), "theme", index)?;
        if tokens.next().is_some() {
            return Err(bad("trailing tokens on sample line".into()));
        }
        if label >= classes {
            return Err(bad(format!("label {label} >= C={classes}")));
        }
        let mut coords = Vec::with_capacity(frames * width);
        for t in 0..frames {
            let row = lines
                .next()
                .ok_or_else(|| bad(format!("truncated: {t} of {frames} frames present")))?;
            let before = coords.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| bad(format!("frame {t}: invalid number `{tok}`")))?;
                coords.push(v);
            }
            let got = coords.len() - before;
            if got != width {
                return Err(bad(format!("frame {t}: {got} values, expected {width}")));
            }
        }
        samples.push(SkeletonSequence {
            id,
            frames,
            joints,
            coords,
            label,
            theme,
        });
    }
    Ok(SkeletonFile {
        frames,
        joints,
        classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, frames: usize, joints: usize, label: usize) -> SkeletonSequence {
        SkeletonSequence {
            id,
            frames,
            joints,
            coords: (0..frames * joints * 3)
                .map(|i| (i as f64 * 0.1 + id as f64).sin() / 3.0)
                .collect(),
            label,
            theme: 1,
        }
    }

    #[test]
    fn write_then_load_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("site.skel");
        let samples = vec![sample(0, 4, 2, 1), sample(9, 4, 2, 0)];
        write_skeleton_file(&path, 4, 2, 3, &samples).unwrap();
        let loaded = load_skeleton_file(&path).unwrap();
        assert_eq!(loaded.samples, samples);
        assert_eq!((loaded.frames, loaded.joints, loaded.classes), (4, 2, 3));
    }

    #[test]
    fn mmasd_keypoint_count_accepted() {
        let text = render_skeleton_file(3, 71, 11, &[sample(0, 3, 71, 10)]);
        let parsed = parse_skeleton_file(&text).unwrap();
        assert_eq!(parsed.samples[0].joints, 71);
        assert_eq!(parsed.samples[0].coords.len(), 3 * 71 * 3);
    }

    #[test]
    fn truncated_frame_block_names_record() {
        let text = render_skeleton_file(4, 2, 3, &[sample(0, 4, 2, 1), sample(1, 4, 2, 2)]);
        let cut: Vec<&str> = text.lines().collect();
        let truncated = cut[..cut.len() - 1].join("\n");
        match parse_skeleton_file(&truncated) {
            Err(DataError::Record { index, reason }) => {
                assert_eq!(index, 1);
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_skeleton_file(""), Err(DataError::Header(_))));
        assert!(matches!(
            parse_skeleton_file("SKEL2 T=1 V=1 C=1\n"),
            Err(DataError::Header(_))
        ));
        assert!(matches!(
            parse_skeleton_file("SKEL1 T=1 V=x C=1\n"),
            Err(DataError::Header(_))
        ));
        let label = "SKEL1 T=1 V=1 C=2\nsample 0 label=2 theme=0\n1 2 3\n";
        assert!(matches!(
            parse_skeleton_file(label),
            Err(DataError::Record { index: 0, .. })
        ));
        let shape = "SKEL1 T=1 V=1 C=2\nsample 0 label=1 theme=0\n1 2\n";
        assert!(matches!(
            parse_skeleton_file(shape),
            Err(DataError::Record { index: 0, reason }) if reason.contains("expected 3")
        ));
    }
}
