use halprobe::probe::{load_params, random_params, save_params, Backbone};
use halprobe::store::{
    read_activation_file, write_activation_file, ActivationRecord, Manifest, ACTV_HEADER_LEN,
};
use halprobe::synthetic::{planted_fixture, FixtureSpec};
use proptest::collection::{btree_set, vec};
use proptest::prelude::*;

fn records() -> impl Strategy<Value = (usize, Vec<ActivationRecord>)> {
    (1usize..12, btree_set((0u64..1000, 0u16..4), 0..24)).prop_flat_map(|(d, keys)| {
        let n = keys.len();
        (
            Just(d),
            Just(keys.into_iter().collect::<Vec<_>>()),
            vec(vec(-1e6f32..1e6, d), n),
            vec(0u16..3, n),
        )
            .prop_map(|(d, keys, rows, tags)| {
                let recs = keys
                    .iter()
                    .zip(rows)
                    .zip(tags)
                    .map(|((&(id, layer), row), tag)| ActivationRecord::new(id, layer, tag, row))
                    .collect();
                (d, recs)
            })
    })
}

fn encode(d: usize, recs: &[ActivationRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    let n = write_activation_file(recs, d, &mut buf).unwrap();
    assert_eq!(n, buf.len() as u64);
    buf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn activation_files_round_trip((d, recs) in records()) {
        let buf = encode(d, &recs);
        prop_assert_eq!(buf.len() as u64, ACTV_HEADER_LEN + recs.len() as u64 * (16 + 4 * d as u64));
        let reader = read_activation_file(&buf[..]).unwrap();
        prop_assert_eq!(reader.header().hidden_dim as usize, d);
        let back = reader.read_all().unwrap();
        prop_assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            prop_assert!(a.bitwise_eq(b));
        }
        prop_assert_eq!(encode(d, &back), buf);
    }

    #[test]
    fn any_prefix_is_a_format_error((d, recs) in records(), cut in any::<prop::sample::Index>()) {
        let buf = encode(d, &recs);
        let at = cut.index(buf.len());
        let err = read_activation_file(&buf[..at]).and_then(|r| r.read_all()).unwrap_err();
        prop_assert!(err.is_format(), "{}", err);
    }

    #[test]
    fn probe_files_round_trip(
        d in 1usize..10,
        h in 1usize..10,
        c in 1usize..3,
        gated in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let backbone = if gated { Backbone::Gated } else { Backbone::Standard };
        let p = random_params(d, h, c, backbone, seed).unwrap();
        let mut buf = Vec::new();
        let n = save_params(&p, &mut buf).unwrap();
        prop_assert_eq!(n as usize, buf.len());
        let back = load_params(&buf[..]).unwrap();
        prop_assert!(p.bitwise_eq(&back));
        prop_assert_eq!(back.backbone(), backbone);
        let mut again = Vec::new();
        save_params(&back, &mut again).unwrap();
        prop_assert_eq!(again, buf.clone());
        for at in 0..buf.len() {
            prop_assert!(load_params(&buf[..at]).unwrap_err().is_format());
        }
    }
}

#[test]
fn duplicate_keys_are_refused_before_writing() {
    let recs = vec![
        ActivationRecord::new(7, 1, 0, vec![0.0; 3]),
        ActivationRecord::new(7, 1, 0, vec![1.0; 3]),
    ];
    let mut buf = Vec::new();
    assert!(write_activation_file(&recs, 3, &mut buf).is_err());
    assert!(buf.is_empty());
}

#[test]
fn non_finite_values_are_refused() {
    let recs = vec![ActivationRecord::new(1, 0, 0, vec![0.0, f32::NAN])];
    assert!(write_activation_file(&recs, 2, Vec::new()).is_err());
}

#[test]
fn manifest_round_trips() {
    let (_, manifest) = planted_fixture(&FixtureSpec {
        records: 50,
        with_labels: true,
        ..FixtureSpec::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    manifest.write(&mut buf).unwrap();
    let back = Manifest::read(&buf[..]).unwrap();
    assert_eq!(back, manifest);
    let mut again = Vec::new();
    back.write(&mut again).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn manifest_errors_name_the_line() {
    let (_, manifest) = planted_fixture(&FixtureSpec {
        records: 3,
        ..FixtureSpec::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    manifest.write(&mut buf).unwrap();
    let mut text = String::from_utf8(buf).unwrap();
    text.push_str("{not json\n");
    let lines = text.lines().count();
    match Manifest::read(text.as_bytes()) {
        Err(halprobe::Error::Parse { line, .. }) => assert_eq!(line, lines),
        other => panic!("unexpected {other:?}"),
    }
}
