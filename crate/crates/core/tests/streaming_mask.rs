mod common;

use fusionformer::streaming::{parse_decoding_name, ChunkWindow};
use fusionformer::build_chunk_mask;

#[test]
fn masks_match_brute_force_on_every_small_case() {
    let mut cases = 0;
    for frames in 1..=12 {
        for chunk in 1..=4 {
            for left in [Some(0), Some(1), Some(2), None] {
                let mask = build_chunk_mask(frames, Some(chunk), left).unwrap();
                for i in 0..frames {
                    for j in 0..frames {
                        assert_eq!(
                            mask.allowed(i, j),
                            common::chunk_allowed(i, j, Some(chunk), left),
                            "T={frames} chunk={chunk} left={left:?} ({i},{j})"
                        );
                    }
                    assert!(mask.allowed(i, i));
                }
                cases += 1;
            }
        }
    }
    assert_eq!(cases, 12 * 4 * 4);
}

#[test]
fn full_context_allows_everything() {
    let mask = build_chunk_mask(7, None, Some(1)).unwrap();
    assert_eq!(mask.allowed_pairs(), 49);
}

#[test]
fn visible_pairs_agree_with_the_mask() {
    for (chunk, left) in [(16, Some(4)), (4, None), (1, Some(0))] {
        let w = ChunkWindow::new(Some(chunk), left).unwrap();
        for frames in [1, 5, 33, 100] {
            assert_eq!(w.visible_pairs(frames), w.build(frames).unwrap().allowed_pairs() as u64);
        }
    }
}

#[test]
fn invalid_windows_are_rejected() {
    assert!(build_chunk_mask(0, None, None).is_err());
    assert!(build_chunk_mask(4, Some(0), None).is_err());
}

#[test]
fn decoding_names_parse() {
    let d = parse_decoding_name("2nd-s-16-inf").unwrap();
    assert_eq!(d.chunk_size, Some(16));
    assert_eq!(d.num_left_chunks, None);
    assert!(d.runs_decoder());
    assert_eq!(d.to_ascii_name(), "2nd-s-16-inf");
    let d = parse_decoding_name("1st-s-16-4").unwrap();
    assert_eq!((d.chunk_size, d.num_left_chunks), (Some(16), Some(4)));
    assert!(!d.runs_decoder());
    assert!(parse_decoding_name("3rd-s-16-4").is_err());
}
