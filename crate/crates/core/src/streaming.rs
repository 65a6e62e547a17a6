//! Chunk-based time-restricted attention masks and the decoding
//! configuration names used on the command line (`1st-s-16-4`, ...).
//!
//! Masks live on the post-subsampling time axis: a chunk of 16 frames covers
//! 64 input frames, i.e. 640 ms of audio at a 10 ms frame shift.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention window: chunk size and how many previous chunks a frame may
/// see. `None` means unbounded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ChunkWindow {
    pub chunk_size: Option<usize>,
    pub num_left_chunks: Option<usize>,
}

impl ChunkWindow {
    pub const FULL: ChunkWindow = ChunkWindow {
        chunk_size: None,
        num_left_chunks: None,
    };

    pub fn new(chunk_size: Option<usize>, num_left_chunks: Option<usize>) -> Result<Self> {
        if chunk_size == Some(0) {
            return Err(Error::InvalidArgument("chunk_size must be at least 1".into()));
        }
        Ok(Self {
            chunk_size,
            num_left_chunks,
        })
    }

    /// Keys visible to query frame `i` in a sequence of `frames`. The
    /// visible set is always one contiguous range containing `i`.
    pub fn visible(&self, i: usize, frames: usize) -> Range<usize> {
        match self.chunk_size {
            None => 0..frames,
            Some(size) => {
                let chunk = i / size;
                let first = match self.num_left_chunks {
                    Some(left) => chunk.saturating_sub(left),
                    None => 0,
                };
                first * size..((chunk + 1) * size).min(frames)
            }
        }
    }

    /// Total number of allowed (query, key) pairs.
    pub fn visible_pairs(&self, frames: usize) -> u64 {
        (0..frames).map(|i| self.visible(i, frames).len() as u64).sum()
    }

    pub fn build(&self, frames: usize) -> Result<ChunkMask> {
        build_chunk_mask(frames, self.chunk_size, self.num_left_chunks)
    }
}

/// Boolean attention mask; row = query frame, column = key frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkMask {
    frames: usize,
    window: ChunkWindow,
    allowed: Vec<bool>,
}

impl ChunkMask {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn window(&self) -> ChunkWindow {
        self.window
    }

    pub fn chunk_size(&self) -> Option<usize> {
        self.window.chunk_size
    }

    pub fn num_left_chunks(&self) -> Option<usize> {
        self.window.num_left_chunks
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.frames + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.frames..(query + 1) * self.frames]
    }

    pub fn visible(&self, query: usize) -> Range<usize> {
        self.window.visible(query, self.frames)
    }

    pub fn allowed_pairs(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

pub fn build_chunk_mask(
    frames: usize,
    chunk_size: Option<usize>,
    num_left_chunks: Option<usize>,
) -> Result<ChunkMask> {
    if frames == 0 {
        return Err(Error::InvalidArgument("mask needs at least one frame".into()));
    }
    let window = ChunkWindow::new(chunk_size, num_left_chunks)?;
    let mut allowed = vec![false; frames * frames];
    for i in 0..frames {
        for j in window.visible(i, frames) {
            allowed[i * frames + j] = true;
        }
    }
    Ok(ChunkMask {
        frames,
        window,
        allowed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    First,
    Second,
}

/// One of the named decoding setups, e.g. `2nd-s-16-∞`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DecodingConfig {
    pub pass: Pass,
    pub streaming: bool,
    pub chunk_size: Option<usize>,
    pub num_left_chunks: Option<usize>,
}

impl DecodingConfig {
    pub const NAMES: [&'static str; 6] = [
        "1st-s-16-4",
        "1st-s-16-∞",
        "1st-ns-∞-∞",
        "2nd-s-16-4",
        "2nd-s-16-∞",
        "2nd-ns-∞-∞",
    ];

    pub fn window(&self) -> ChunkWindow {
        ChunkWindow {
            chunk_size: self.chunk_size,
            num_left_chunks: self.num_left_chunks,
        }
    }

    /// Whether the attention decoder runs (second-pass rescoring).
    pub fn runs_decoder(&self) -> bool {
        self.pass == Pass::Second
    }

    /// Name spelled with `inf` instead of `∞`, for flags and file names.
    pub fn to_ascii_name(&self) -> String {
        self.render("inf")
    }

    fn render(&self, infinity: &str) -> String {
        let limit = |v: Option<usize>| v.map_or_else(|| infinity.to_string(), |n| n.to_string());
        format!(
            "{}-{}-{}-{}",
            match self.pass {
                Pass::First => "1st",
                Pass::Second => "2nd",
            },
            if self.streaming { "s" } else { "ns" },
            limit(self.chunk_size),
            limit(self.num_left_chunks)
        )
    }
}

impl fmt::Display for DecodingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render("∞"))
    }
}

pub fn parse_decoding_name(name: &str) -> Result<DecodingConfig> {
    name.parse()
}

impl FromStr for DecodingConfig {
    type Err = Error;

    fn from_str(name: &str) -> Result<Self> {
        let err = |position: usize, message: &str| Error::Parse {
            input: name.to_string(),
            position,
            message: message.to_string(),
        };

        let mut fields = Vec::with_capacity(4);
        let mut start = 0;
        for (idx, ch) in name.char_indices() {
            if ch == '-' {
                fields.push((start, &name[start..idx]));
                start = idx + 1;
            }
        }
        fields.push((start, &name[start..]));
        if fields.len() != 4 {
            let pos = fields.get(4).map_or(name.len(), |f| f.0);
            return Err(err(pos, "expected four `-`-separated fields"));
        }

        let pass = match fields[0].1 {
            "1st" => Pass::First,
            "2nd" => Pass::Second,
            _ => return Err(err(fields[0].0, "pass must be `1st` or `2nd`")),
        };
        let streaming = match fields[1].1 {
            "s" => true,
            "ns" => false,
            _ => return Err(err(fields[1].0, "mode must be `s` or `ns`")),
        };
        let limit = |(pos, text): (usize, &str), min: usize| -> Result<Option<usize>> {
            if text == "∞" || text == "inf" {
                return Ok(None);
            }
            if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err(pos, "expected an integer, `inf` or `∞`"));
            }
            if text.len() > 1 && text.starts_with('0') {
                return Err(err(pos, "leading zeros are not allowed"));
            }
            let v: usize = text.parse().map_err(|_| err(pos, "integer out of range"))?;
            if v < min {
                return Err(err(pos, &format!("must be at least {min}")));
            }
            Ok(Some(v))
        };
        let chunk_size = limit(fields[2], 1)?;
        let num_left_chunks = limit(fields[3], 0)?;

        if !streaming && (chunk_size.is_some() || num_left_chunks.is_some()) {
            return Err(err(fields[2].0, "non-streaming decoding needs `∞-∞`"));
        }
        if streaming && chunk_size.is_none() {
            return Err(err(fields[2].0, "streaming decoding needs a finite chunk size"));
        }
        Ok(DecodingConfig {
            pass,
            streaming,
            chunk_size,
            num_left_chunks,
        })
    }
}

impl Serialize for DecodingConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_ascii_name())
    }
}

impl<'de> Deserialize<'de> for DecodingConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Literal floor-division rule, independent of `ChunkWindow::visible`.
    fn rule(i: usize, j: usize, chunk: Option<usize>, left: Option<usize>) -> bool {
        let Some(c) = chunk else { return true };
        let (qi, kj) = ((i / c) as i64, (j / c) as i64);
        let lo = left.map_or(i64::MIN, |l| qi - l as i64);
        kj >= lo && kj <= qi
    }

    #[test]
    fn full_context_is_all_true() {
        let m = build_chunk_mask(4, None, None).unwrap();
        assert_eq!(m.allowed_pairs(), 16);
    }

    #[test]
    fn block_diagonal_without_left_context() {
        let m = build_chunk_mask(4, Some(2), Some(0)).unwrap();
        for i in 0..4 {
            let row: Vec<usize> = (0..4).filter(|&j| m.allowed(i, j)).collect();
            assert_eq!(row, if i < 2 { vec![0, 1] } else { vec![2, 3] });
        }
    }

    #[test]
    fn one_left_chunk() {
        let m = build_chunk_mask(6, Some(2), Some(1)).unwrap();
        let row: Vec<usize> = (0..6).filter(|&j| m.allowed(4, j)).collect();
        assert_eq!(row, vec![2, 3, 4, 5]);
    }

    #[test]
    fn exhaustive_agreement_with_floor_division_rule() {
        for frames in 1..=12 {
            for chunk in 1..=4 {
                for left in [Some(0), Some(1), Some(2), None] {
                    let m = build_chunk_mask(frames, Some(chunk), left).unwrap();
                    for i in 0..frames {
                        assert!(m.allowed(i, i));
                        for j in 0..frames {
                            assert_eq!(m.allowed(i, j), rule(i, j, Some(chunk), left));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_non_positive_arguments() {
        assert!(build_chunk_mask(0, None, None).is_err());
        assert!(build_chunk_mask(4, Some(0), None).is_err());
    }

    #[test]
    fn parses_the_named_configurations() {
        let c: DecodingConfig = "1st-s-16-4".parse().unwrap();
        assert_eq!(
            c,
            DecodingConfig {
                pass: Pass::First,
                streaming: true,
                chunk_size: Some(16),
                num_left_chunks: Some(4)
            }
        );
        let c = parse_decoding_name("2nd-ns-∞-∞").unwrap();
        assert_eq!((c.pass, c.streaming, c.chunk_size, c.num_left_chunks), (Pass::Second, false, None, None));
        assert_eq!(parse_decoding_name("2nd-s-16-inf").unwrap().to_ascii_name(), "2nd-s-16-inf");
        for name in DecodingConfig::NAMES {
            assert_eq!(parse_decoding_name(name).unwrap().to_string(), name);
        }
    }

    #[test]
    fn rejects_malformed_names() {
        match parse_decoding_name("1st-x-16-4") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 4),
            other => panic!("unexpected {other:?}"),
        }
        for bad in ["", "1st-s-16", "3rd-s-16-4", "1st-s-0-4", "1st-ns-16-4", "1st-s-inf-4", "1st-s-16-4-1", "1st-s-016-4"] {
            assert!(parse_decoding_name(bad).is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn more_left_chunks_never_remove_pairs(frames in 1usize..40, chunk in 1usize..8, left in 0usize..6) {
            let small = build_chunk_mask(frames, Some(chunk), Some(left)).unwrap();
            let large = build_chunk_mask(frames, Some(chunk), Some(left + 1)).unwrap();
            let unbounded = build_chunk_mask(frames, Some(chunk), None).unwrap();
            for i in 0..frames {
                for j in 0..frames {
                    prop_assert!(!small.allowed(i, j) || large.allowed(i, j));
                    prop_assert!(!large.allowed(i, j) || unbounded.allowed(i, j));
                }
            }
        }

        #[test]
        fn chunk_covering_sequence_is_full_attention(frames in 1usize..30, extra in 0usize..5) {
            let m = build_chunk_mask(frames, Some(frames + extra), None).unwrap();
            prop_assert_eq!(m, build_chunk_mask(frames, None, None).unwrap().clone_with_window(ChunkWindow { chunk_size: Some(frames + extra), num_left_chunks: None }));
        }

        #[test]
        fn decoding_names_round_trip(pass in 0..2, chunk in 1usize..64, left in proptest::option::of(0usize..8)) {
            let c = DecodingConfig {
                pass: if pass == 0 { Pass::First } else { Pass::Second },
                streaming: true,
                chunk_size: Some(chunk),
                num_left_chunks: left,
            };
            prop_assert_eq!(parse_decoding_name(&c.to_string()).unwrap(), c);
            let ascii = c.to_ascii_name();
            prop_assert_eq!(parse_decoding_name(&ascii).unwrap().to_ascii_name(), ascii);
        }
    }

    impl ChunkMask {
        fn clone_with_window(&self, window: ChunkWindow) -> ChunkMask {
            ChunkMask {
                window,
                ..self.clone()
            }
        }
    }
}
