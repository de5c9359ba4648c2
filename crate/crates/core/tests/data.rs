use maskdiff::data::*;
use maskdiff::diffusion::draw_time_masking;
use maskdiff::rng::seeded;
use maskdiff::Error;
use proptest::prelude::*;

fn letters() -> Vocab {
    Vocab::from_chars("abcdefgh".chars())
}

#[test]
fn reserved_ids_never_come_from_text() {
    let v = letters();
    assert_eq!(v.size(), 10);
    let ids = v.encode("hgfedcba").unwrap();
    assert!(ids.iter().all(|&i| i != EOS_ID && i != MASK_ID));
    assert_eq!(v.decode(&[EOS_ID, MASK_ID]), "<eos><mask>");
    assert!(matches!(v.encode("z"), Err(Error::Precondition(_))));
    let restored = Vocab::from_stored(&v.stored()).unwrap();
    assert_eq!(restored, v);
    assert!(Vocab::from_stored("aa").is_err());
}

#[test]
fn packing_windows() {
    let v = letters();
    // 3 + 1 + 4 = 8 tokens in the stream.
    let seqs = pack_pretrain(&["abc", "defg"], &v, 4).unwrap();
    assert_eq!(seqs.len(), 2);
    let seqs = pack_pretrain(&["abc", "defg"], &v, 3).unwrap();
    assert_eq!(seqs.len(), 2);
    let mut stream = v.encode("abc").unwrap();
    stream.push(EOS_ID);
    stream.extend(v.encode("defg").unwrap());
    let joined: Vec<u32> = seqs.concat();
    assert_eq!(&stream[..joined.len()], &joined[..]);
    assert!(pack_pretrain::<&str>(&[], &v, 4).unwrap().is_empty());
    assert!(pack_pretrain(&["abc"], &v, 0).is_err());
}

#[test]
fn documents_end_with_eos() {
    let v = letters();
    let docs = encode_documents(&["ab", "c"], &v).unwrap();
    assert_eq!(docs, vec![vec![2, 3, EOS_ID], vec![4, EOS_ID]]);
}

#[test]
fn random_length_rates() {
    let mut rng = seeded(1);
    let original: Vec<Vec<u32>> = (0..50).map(|i| vec![2; 10 + i % 5]).collect();
    let mut batch = original.clone();
    apply_random_length(&mut batch, 0.0, 8, &mut rng).unwrap();
    assert_eq!(batch, original);
    apply_random_length(&mut batch, 1.0, 8, &mut rng).unwrap();
    assert!(batch.iter().all(|s| (1..=8).contains(&s.len())));
    assert!(apply_random_length(&mut batch, 1.5, 8, &mut rng).is_err());

    let mut big: Vec<Vec<u32>> = vec![vec![2; 64]; 100_000];
    apply_random_length(&mut big, 0.01, 32, &mut rng).unwrap();
    let rate = big.iter().filter(|s| s.len() < 64).count() as f64 / 100_000.0;
    assert!((rate - 0.01).abs() <= 0.003, "{rate}");
}

#[test]
fn sft_padding() {
    let same = vec![
        SftPair { prompt: vec![2], response: vec![3, 4] },
        SftPair { prompt: vec![2, 3], response: vec![5, 6] },
    ];
    assert_eq!(prepare_sft_batch(&same).unwrap(), same);
    let mixed = vec![
        SftPair { prompt: vec![2], response: vec![3, 4, 5] },
        SftPair { prompt: vec![2], response: vec![3, 4, 5, 6, 7] },
    ];
    let padded = prepare_sft_batch(&mixed).unwrap();
    assert_eq!(padded[0].response, vec![3, 4, 5, EOS_ID, EOS_ID]);
    assert_eq!(padded[1].response, mixed[1].response);
    let wide = prepare_sft_batch_to(&mixed, 7).unwrap();
    assert!(wide.iter().all(|p| p.response.len() == 7));
    assert!(prepare_sft_batch(&[]).is_err());
    let bad = vec![SftPair { prompt: vec![MASK_ID], response: vec![2] }];
    assert!(prepare_sft_batch(&bad).is_err());
}

#[test]
fn padded_positions_enter_the_loss() {
    let pairs = vec![
        SftPair { prompt: vec![2], response: vec![3] },
        SftPair { prompt: vec![2], response: vec![3, 4, 5] },
    ];
    let padded = prepare_sft_batch(&pairs).unwrap();
    let mut rng = seeded(2);
    let mut saw_padding_masked = false;
    for _ in 0..200 {
        let d = draw_time_masking(&padded[0].prompt, &padded[0].response, MASK_ID, &mut rng).unwrap();
        assert!(d.masked.iter().all(|&i| i >= 1));
        if d.masked.iter().any(|&i| i >= 2) {
            saw_padding_masked = true;
            assert!(d.masked.iter().filter(|&&i| i >= 2).all(|&i| d.target[i] == EOS_ID));
        }
    }
    assert!(saw_padding_masked);
}

#[test]
fn multiturn_dialogues() {
    let one = split_multiturn(&["hi", "yo"]).unwrap();
    assert_eq!(one, vec![TextPair { prompt: "hi".into(), response: "yo".into() }]);
    let two = split_multiturn(&["p0", "r0", "p1", "r1"]).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(two[1].prompt, "p0r0p1");
    assert_eq!(two[1].response, "r1");
    assert!(matches!(split_multiturn(&["a", "b", "c"]), Err(Error::Malformed(_))));
    assert!(split_multiturn::<&str>(&[]).is_err());
}

#[test]
fn sft_record_parsing() {
    let text = "{\"prompt\":\"a\",\"response\":\"b\"}\n\n{\"turns\":[\"x\",\"y\",\"z\",\"w\"]}\n";
    let pairs = parse_sft_records(text).unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(pairs[2].prompt, "xyz");
    assert!(matches!(parse_sft_records("{\"prompt\":\"a\"}\n"), Err(Error::Format { line: 1, .. })));
    assert!(matches!(parse_sft_records("\n{\"turns\":[\"x\"]}"), Err(Error::Format { line: 2, .. })));
}

#[test]
fn task_answers() {
    assert_eq!(task_answer(TaskKind::Copy, "abc>").as_deref(), Some("abc"));
    assert_eq!(task_answer(TaskKind::Sort, "cba>").as_deref(), Some("abc"));
    assert_eq!(task_answer(TaskKind::Arithmetic, "12+07=").as_deref(), Some("19"));
    assert!("bogus".parse::<TaskKind>().is_err());
    assert_eq!("sort".parse::<TaskKind>().unwrap(), TaskKind::Sort);
    for kind in [TaskKind::Copy, TaskKind::Sort, TaskKind::Arithmetic] {
        let pairs = gen_task_corpora(kind, 200, &mut seeded(3));
        assert_eq!(pairs, gen_task_corpora(kind, 200, &mut seeded(3)));
        let vocab = kind.vocab();
        for p in &pairs {
            assert_eq!(task_answer(kind, &p.prompt).unwrap(), p.response);
            assert!(p.response.chars().count() <= kind.max_response_len());
            assert!(vocab.encode(&p.prompt).is_ok() && vocab.encode(&p.response).is_ok());
        }
    }
    assert_eq!(TaskKind::Copy.vocab().size(), 29);
}

#[test]
fn reversal_pairs_are_unique_and_one_directional() {
    let data = gen_reversal_pairs(150, &mut seeded(4));
    assert_eq!(data, gen_reversal_pairs(150, &mut seeded(4)));
    let mut all: Vec<&String> = data.pairs.iter().flat_map(|(a, b)| [a, b]).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 300);
    for (probe, doc) in data.forward.iter().zip(&data.corpus) {
        assert!(doc.contains(&probe.answer));
        assert!(doc.starts_with(&probe.prompt));
    }
    for (probe, (a, b)) in data.reversal.iter().zip(&data.pairs) {
        assert_eq!(&probe.prompt, b);
        assert_eq!(&probe.answer, a);
        for doc in &data.corpus {
            // The answer never follows its cue anywhere in the training text.
            if let Some(i) = doc.find(b.as_str()) {
                assert!(!doc[i + b.len()..].contains(a.as_str()));
            }
        }
    }
}

#[test]
fn split_is_seeded() {
    let (train, test) = shuffle_split((0..10).collect::<Vec<_>>(), 3, &mut seeded(5));
    assert_eq!(train.len(), 7);
    assert_eq!(test.len(), 3);
    let (train2, test2) = shuffle_split((0..10).collect::<Vec<_>>(), 3, &mut seeded(5));
    assert_eq!((train, test), (train2, test2));
}

proptest! {
    #[test]
    fn tokenizer_round_trip(s in "[a-h]{0,40}") {
        let v = letters();
        prop_assert_eq!(v.decode(&v.encode(&s).unwrap()), s);
    }

    #[test]
    fn preparation_never_introduces_mask(lens in prop::collection::vec(1usize..8, 1..6), min in 0usize..10) {
        let pairs: Vec<SftPair> = lens.iter().map(|&n| SftPair { prompt: vec![2; n], response: vec![3; n] }).collect();
        let out = prepare_sft_batch_to(&pairs, min).unwrap();
        let width = out[0].response.len();
        prop_assert!(out.iter().all(|p| p.response.len() == width && !p.response.contains(&MASK_ID)));
        prop_assert_eq!(width, lens.iter().copied().max().unwrap().max(min));
    }
}
