use halprobe::attribution::{load_token_scores, render_heatmap, HeatmapFormat, TokenScoreRecord};
use proptest::collection::vec;
use proptest::prelude::*;

fn strip_tags(html: &str) -> String {
    let mut out = String::new();
    let mut in_tag = false;
    for c in html.chars() {
        match c {
            '<' => in_tag = true,
            '>' if in_tag => in_tag = false,
            _ if !in_tag => out.push(c),
            _ => {}
        }
    }
    out.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&")
}

fn strip_ansi(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\x1b' {
            for d in chars.by_ref() {
                if d == 'm' {
                    break;
                }
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Text between `open` and the next `</p>` for every occurrence.
fn paragraphs<'a>(html: &'a str, open: &str) -> Vec<&'a str> {
    html.match_indices(open)
        .map(|(i, _)| {
            let rest = &html[i + open.len()..];
            &rest[..rest.find("</p>").unwrap()]
        })
        .collect()
}

fn record() -> impl Strategy<Value = TokenScoreRecord> {
    (1usize..8)
        .prop_flat_map(|n| {
            (
                any::<u64>(),
                vec("[ -~éß<>&\"']{0,6}", n),
                vec(0.0f64..100.0, n),
                proptest::option::of("[ -~à<&]{0,20}"),
                vec((0usize..24, 0usize..24), 0..3),
            )
        })
        .prop_map(|(record_id, tokens, scores, reply, spans)| TokenScoreRecord {
            record_id,
            tokens,
            scores,
            hallucinated_spans: reply
                .as_ref()
                .map(|_| spans.into_iter().map(|(a, b)| [a.min(b), a.max(b)]).collect()),
            reply,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn html_text_reproduces_tokens_and_reply(recs in vec(record(), 1..4)) {
        let html = render_heatmap(&recs, HeatmapFormat::Html);
        let queries = paragraphs(&html, "<p class=\"query\">");
        prop_assert_eq!(queries.len(), recs.len());
        let mut replies = paragraphs(&html, "<p class=\"reply\">").into_iter();
        for (rec, q) in recs.iter().zip(queries) {
            prop_assert_eq!(q.matches("<span class=\"tok\"").count(), rec.tokens.len());
            prop_assert_eq!(strip_tags(q), rec.tokens.concat());
            if let Some(reply) = &rec.reply {
                prop_assert_eq!(&strip_tags(replies.next().unwrap()), reply);
            }
        }
        prop_assert!(replies.next().is_none());
    }

    #[test]
    fn ansi_text_reproduces_tokens(recs in vec(record(), 1..4)) {
        let out = strip_ansi(&render_heatmap(&recs, HeatmapFormat::Ansi));
        let mut expected = String::new();
        for rec in &recs {
            expected.push_str(&format!("record {}\n{}\n", rec.record_id, rec.tokens.concat()));
            if let Some(reply) = &rec.reply {
                expected.push_str(&format!("reply: {reply}\n"));
            }
        }
        prop_assert_eq!(out, expected);
    }

    #[test]
    fn rendering_ignores_score_scale(recs in vec(record(), 1..4), scale in 1e-3f64..1e3) {
        let scaled: Vec<TokenScoreRecord> = recs
            .iter()
            .map(|r| TokenScoreRecord { scores: r.scores.iter().map(|s| s * 10.0).collect(), ..r.clone() })
            .collect();
        let other: Vec<TokenScoreRecord> = recs
            .iter()
            .map(|r| TokenScoreRecord { scores: r.scores.iter().map(|s| s * scale).collect(), ..r.clone() })
            .collect();
        for format in [HeatmapFormat::Html, HeatmapFormat::Ansi] {
            let base = render_heatmap(&recs, format);
            prop_assert_eq!(&render_heatmap(&scaled, format), &base);
            prop_assert_eq!(&render_heatmap(&other, format), &base);
        }
    }

    #[test]
    fn jsonl_round_trips(recs in vec(record(), 0..5)) {
        let text: String = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        prop_assert_eq!(load_token_scores(text.as_bytes()).unwrap(), recs);
    }
}

#[test]
fn spans_are_highlighted_in_both_formats() {
    let rec = TokenScoreRecord {
        record_id: 9,
        tokens: vec!["Who".into(), " wrote".into(), " it".into()],
        scores: vec![0.0, 2.0, 1.0],
        reply: Some("It was Tolstoy in 1869.".into()),
        hallucinated_spans: Some(vec![[7, 14]]),
    };
    let html = render_heatmap(std::slice::from_ref(&rec), HeatmapFormat::Html);
    assert!(html.contains("<span class=\"hallucinated\">Tolstoy</span>"));
    assert!(html.contains("rgba(220, 38, 38, 1.000)\"> wrote"));
    assert!(html.contains("rgba(220, 38, 38, 0.000)\">Who"));
    let ansi = render_heatmap(&[rec], HeatmapFormat::Ansi);
    assert!(ansi.contains("\x1b[4;31mTolstoy\x1b[24;39m"));
}
