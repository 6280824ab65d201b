//! Offline acceptance suite. Runs every criterion, prints one line each,
//! and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use posterpanel::canvas::{
    apply_adjustment, detect_overlaps, parse_document, rasterize, serialize_document, set_image_source, set_text,
    total_overlap_area, Adjustment, Payload, BACKGROUND, DEFAULT_MIN_OVERLAP_FRACTION,
};
use posterpanel::discussion::{
    self, DiscussionError, DiscussionState, Operation, RoleTag, TAG_ANSWER, TAG_CONCLUDE, TAG_QUESTION,
};
use posterpanel::feedback::{guardrail_check, FeedbackItem, FeedbackUnit, ThemeDescriptor, TAG_GENERATE};
use posterpanel::gateway::{AssetStore, EmbeddingVector, GatewayConfig, RequestKind, ScriptedBackend};
use posterpanel::persona::{self, BriefExtract, Level, MarketingBrief, PersonaSet, TAG_BUILD};
use posterpanel::theme::{
    apply_theme, extract_embellishments, load_corpus, query_templates, reinsert_embellishments, resolve_overlaps, TemplateIndex,
};
use posterpanel::{CanvasDocument, Element, ElementKind, Gateway};
use posterpanel_service::pipeline;

type Check = fn() -> String;

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("canvas round-trip", canvas_round_trip),
        ("mutation locality", mutation_locality),
        ("overlap oracle", overlap_oracle),
        ("ranking oracle", ranking_oracle),
        ("persona grid", persona_grid),
        ("guardrail contract", guardrail_contract),
        ("discussion state machine", discussion_state_machine),
        ("theme application conservation", theme_conservation),
        ("end-to-end batch determinism", batch_determinism),
        ("crash-safety", crash_safety),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS  {name}: {detail} ({:.2} s)", started.elapsed().as_secs_f64()),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn brief(rel: &str) -> MarketingBrief {
    MarketingBrief::from_text("brief.txt", read(rel))
}

// ---------------------------------------------------------------------------
// random documents

const KNOWN_KEYS: &[&str] = &[
    "id", "type", "x", "y", "width", "height", "rotation", "text", "fontSize", "fontFamily", "fill", "src", "svgData", "zHint",
    "schemaVersion", "children",
];

fn coord(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..3) {
        0 => f64::from(rng.random_range(-200i32..1200)),
        1 => f64::from(rng.random_range(-200_000i32..1_200_000)) / 1000.0,
        _ => rng.random_range(-1.0e6..1.0e6),
    }
}

fn length(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.5) {
        f64::from(rng.random_range(0u32..800))
    } else {
        rng.random_range(0.0..800.0)
    }
}

fn word(rng: &mut ChaCha8Rng, alphabet: &[u8], len: std::ops::Range<usize>) -> String {
    let n = rng.random_range(len);
    (0..n).map(|_| *alphabet.choose(rng).unwrap() as char).collect()
}

const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn unicode_text(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[&str] = &["Sale", " ", "é", "ß", "\"", "\\", "\n", "\t", "☕", "50%", "{}", "Mum's", "日本", "\u{1F389}", "a/b"];
    (0..rng.random_range(0..8)).map(|_| *POOL.choose(rng).unwrap()).collect()
}

fn extras(rng: &mut ChaCha8Rng) -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    for _ in 0..rng.random_range(0..3) {
        let key = format!("{}{}", word(rng, LOWER, 1..2), word(rng, b"abcXYZ", 0..6));
        if KNOWN_KEYS.contains(&key.as_str()) {
            continue;
        }
        let v = match rng.random_range(0..4) {
            0 => Value::from(rng.random_bool(0.5)),
            1 => Value::from(rng.random_range(-1000i64..1000)),
            2 => Value::from(unicode_text(rng)),
            _ => json!({"z": rng.random_range(-9i64..9), "a": [word(rng, LOWER, 1..4), {"y": 1, "b": null}]}),
        };
        m.insert(key, v);
    }
    m
}

fn random_element(rng: &mut ChaCha8Rng, id: String) -> Element {
    let (x, y, w, h) = (coord(rng), coord(rng), length(rng), length(rng));
    let mut e = match rng.random_range(0..6) {
        0..=2 => {
            let mut e = Element::text(id, x, y, w, h, unicode_text(rng)).with_font_size(rng.random_range(1.0..120.0));
            if let Payload::Text(t) = &mut e.payload {
                t.font_family = word(rng, LOWER, 3..9);
                t.fill = format!("#{:06x}", rng.random_range(0u32..0x1000000));
            }
            e
        }
        3 | 4 => Element::image(id, x, y, w, h, format!("images/{}.png", word(rng, LOWER, 1..10))),
        _ => Element::vector(id, x, y, w, h, format!("<svg>{}</svg>", word(rng, LOWER, 0..10)), rng.random_range(-5..20)),
    };
    let rotation = match rng.random_range(0..3) {
        0 => 0.0,
        1 => 90.0,
        _ => rng.random_range(-360.0..360.0),
    };
    e = e.with_rotation(rotation);
    e.extra = extras(rng);
    e
}

fn random_document(rng: &mut ChaCha8Rng, max_elements: usize) -> CanvasDocument {
    let n = rng.random_range(0..=max_elements);
    let elements = (0..n).map(|i| random_element(rng, format!("e{i}"))).collect();
    CanvasDocument::from_parts(rng.random_range(1..2000), rng.random_range(1..2000), 1, elements, extras(rng))
        .expect("generated document is valid")
}

/// Re-emits JSON with every object's keys reversed.
fn scramble(canonical: &str) -> String {
    fn rev(v: &Value) -> Value {
        match v {
            Value::Object(m) => Value::Object(m.iter().rev().map(|(k, v)| (k.clone(), rev(v))).collect()),
            Value::Array(a) => Value::Array(a.iter().map(rev).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&rev(&serde_json::from_str(canonical).unwrap())).unwrap()
}

// ---------------------------------------------------------------------------
// 1

fn canvas_round_trip() -> String {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for n in 0..100 {
        let doc = random_document(&mut rng, 20);
        let s = serialize_document(&doc);
        let back = parse_document(&s).unwrap_or_else(|e| panic!("doc {n}: {e}"));
        assert_eq!(back, doc, "doc {n} changed after a round trip");
        assert_eq!(serialize_document(&back), s, "doc {n} is not byte-stable");
        assert_eq!(serialize_document(&parse_document(&scramble(&s)).unwrap()), s, "doc {n} depends on key order");
    }
    let golden = parse_document(&read("canvas/golden-10.json")).unwrap();
    let expected = read("canvas/golden-10.canonical.json");
    assert_eq!(serialize_document(&golden), expected, "golden canonical form");
    assert_eq!(serialize_document(&parse_document(&expected).unwrap()), expected);
    for case in ["cafe", "sports"] {
        let once = serialize_document(&parse_document(&read(&format!("{case}/draft.json"))).unwrap());
        assert_eq!(serialize_document(&parse_document(&once).unwrap()), once, "{case} draft");
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    "100 random documents and 3 fixtures".into()
}

// ---------------------------------------------------------------------------
// 2

/// Per child index, the keys whose values differ; plus whether top-level
/// fields other than `children` are unchanged.
fn changed_fields(before: &str, after: &str) -> (BTreeMap<usize, BTreeSet<String>>, bool) {
    let a: Value = serde_json::from_str(before).unwrap();
    let b: Value = serde_json::from_str(after).unwrap();
    let (oa, ob) = (a.as_object().unwrap(), b.as_object().unwrap());
    let top_same = oa.len() == ob.len() && oa.iter().filter(|(k, _)| *k != "children").all(|(k, v)| ob.get(k) == Some(v));
    let (ca, cb) = (a["children"].as_array().unwrap(), b["children"].as_array().unwrap());
    assert_eq!(ca.len(), cb.len());
    let mut out = BTreeMap::new();
    for (i, (x, y)) in ca.iter().zip(cb).enumerate() {
        let keys: BTreeSet<&String> = x.as_object().unwrap().keys().chain(y.as_object().unwrap().keys()).collect();
        let diff: BTreeSet<String> = keys.into_iter().filter(|k| x.get(*k) != y.get(*k)).cloned().collect();
        if !diff.is_empty() {
            out.insert(i, diff);
        }
    }
    (out, top_same)
}

fn mutation_locality() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10CA1);
    let mut done = 0;
    let mut per_kind = BTreeMap::<&str, usize>::new();
    while done < 200 {
        let doc = random_document(&mut rng, 12);
        if doc.elements().is_empty() {
            continue;
        }
        let i = rng.random_range(0..doc.elements().len());
        let e = &doc.elements()[i];
        let id = e.id.clone();
        // offsets are fractional and texts end in "!", so new values never equal old ones
        let (label, result, expected): (&str, _, Vec<&str>) = match (rng.random_range(0..3), e.kind()) {
            (0, ElementKind::Text) => ("text", set_text(&doc, &id, &format!("{}!", word(&mut rng, LOWER, 1..20))), vec!["text"]),
            (0, ElementKind::Image) => {
                ("image", set_image_source(&doc, &id, &format!("asset:{:08x}", rng.random::<u32>())), vec!["src"])
            }
            (1, _) => {
                let x = f64::from(rng.random_range(-100i32..900)) + 0.3125;
                let y = f64::from(rng.random_range(-100i32..900)) + 0.6875;
                ("move", apply_adjustment(&doc, &Adjustment::reposition(&id, x, y, "")), vec!["x", "y"])
            }
            (_, kind) => {
                let mut pick = || rng.random_bool(0.6).then(|| f64::from(rng.random_range(1i32..900)) + 0.5);
                let (w, h, f) = (pick(), pick(), pick().filter(|_| kind == ElementKind::Text));
                if w.is_none() && h.is_none() && f.is_none() {
                    continue;
                }
                let keys = [(w, "width"), (h, "height"), (f, "fontSize")].into_iter().filter(|(v, _)| v.is_some()).map(|(_, k)| k);
                ("resize", apply_adjustment(&doc, &Adjustment::resize(&id, w, h, f)), keys.collect())
            }
        };
        let after = result.unwrap_or_else(|e| panic!("{label} on {id}: {e}"));
        let (changed, top_same) = changed_fields(&serialize_document(&doc), &serialize_document(&after));
        assert!(top_same, "{label} changed page fields");
        let expected: BTreeSet<String> = expected.into_iter().map(String::from).collect();
        assert_eq!(changed, BTreeMap::from([(i, expected)]), "{label} on {id}");
        *per_kind.entry(label).or_default() += 1;
        done += 1;
    }
    format!("200 applications {per_kind:?}")
}

// ---------------------------------------------------------------------------
// 3

/// Integer boxes inside the page, rotated by quarter turns only where the
/// rotated box stays on the pixel grid, so pixel counts are exact.
fn grid_document(rng: &mut ChaCha8Rng) -> CanvasDocument {
    const PAGE: u32 = 120;
    let mut elements = Vec::new();
    for i in 0..rng.random_range(0..=10) {
        let (w, h) = (rng.random_range(1u32..60), rng.random_range(1u32..60));
        let quarter = rng.random_range(0u32..4);
        let turns = if (w + h) % 2 == 0 { quarter } else { quarter & 2 };
        let (bw, bh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
        let (bx, by) = (rng.random_range(0..=PAGE - bw), rng.random_range(0..=PAGE - bh));
        let x = f64::from(bx) + (f64::from(bw) - f64::from(w)) / 2.0;
        let y = f64::from(by) + (f64::from(bh) - f64::from(h)) / 2.0;
        let id = format!("n{i}");
        let e = match rng.random_range(0..3) {
            0 => Element::text(id, x, y, f64::from(w), f64::from(h), "Sample"),
            1 => Element::image(id, x, y, f64::from(w), f64::from(h), "missing.png"),
            _ => Element::vector(id, x, y, f64::from(w), f64::from(h), "<svg/>", i64::from(i)),
        };
        elements.push(e.with_rotation(f64::from(turns) * 90.0));
    }
    CanvasDocument::new(PAGE, PAGE, elements).unwrap()
}

fn pixel_mask(doc: &CanvasDocument, e: &Element) -> Vec<bool> {
    let solo = CanvasDocument::new(doc.width(), doc.height(), vec![e.clone()]).unwrap();
    rasterize(&solo).unwrap().pixels().map(|p| *p != BACKGROUND).collect()
}

fn overlap_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0E71A9);
    let mut positives = 0;
    for n in 0..200 {
        let doc = grid_document(&mut rng);
        let content: Vec<&Element> = doc.elements().iter().filter(|e| e.kind() != ElementKind::Vector).collect();
        let masks: Vec<Vec<bool>> = content.iter().map(|e| pixel_mask(&doc, e)).collect();
        let mut oracle = BTreeSet::new();
        for i in 0..content.len() {
            for j in i + 1..content.len() {
                let shared = masks[i].iter().zip(&masks[j]).filter(|(a, b)| **a && **b).count() as f64;
                let ai = masks[i].iter().filter(|p| **p).count() as f64;
                let aj = masks[j].iter().filter(|p| **p).count() as f64;
                if shared > DEFAULT_MIN_OVERLAP_FRACTION * ai.min(aj) {
                    let (a, b) = (content[i].id.clone(), content[j].id.clone());
                    oracle.insert(if a < b { (a, b) } else { (b, a) });
                }
            }
        }
        let found: BTreeSet<(String, String)> =
            detect_overlaps(&doc, DEFAULT_MIN_OVERLAP_FRACTION).into_iter().map(|o| (o.a, o.b)).collect();
        assert_eq!(found, oracle, "document {n}");
        positives += oracle.len();
    }
    format!("200 documents, {positives} overlapping pairs, 0 mismatches")
}

// ---------------------------------------------------------------------------
// 4

fn reference_cosine(a: &[f64], b: &[f64]) -> f64 {
    fn kahan(xs: impl Iterator<Item = f64>) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for x in xs {
            let y = x - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        sum
    }
    let dot = kahan(a.iter().zip(b).map(|(x, y)| x * y));
    dot / (kahan(a.iter().map(|x| x * x)).sqrt() * kahan(b.iter().map(|x| x * x)).sqrt())
}

fn random_image(rng: &mut ChaCha8Rng) -> image::RgbImage {
    let mut img = image::RgbImage::from_pixel(24, 24, image::Rgb(rng.random()));
    for _ in 0..rng.random_range(0..4) {
        let (x0, y0) = (rng.random_range(0..24), rng.random_range(0..24));
        let c = image::Rgb(rng.random());
        for y in y0..(y0 + 8).min(24) {
            for x in x0..(x0 + 8).min(24) {
                img.put_pixel(x, y, c);
            }
        }
    }
    img
}

fn ranking_oracle() -> String {
    let mut ties = 0;
    for (size, seed) in [(10usize, 11u64), (100, 12), (1000, 13)] {
        let gw = Gateway::new(Arc::new(ScriptedBackend::in_memory()), AssetStore::in_memory(), GatewayConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<usize> = (0..size).collect();
        ids.shuffle(&mut rng);
        let mut entries: Vec<(String, EmbeddingVector)> = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            // every seventh entry repeats its predecessor, forcing ties
            let v = match entries.last() {
                Some((_, prev)) if i % 7 == 6 => prev.clone(),
                _ => gw.embed_image(&random_image(&mut rng)).unwrap(),
            };
            entries.push((format!("t{id:04}"), v));
        }
        let index = TemplateIndex::new(gw.embedder_id(), entries.clone()).unwrap();
        let descriptor = ThemeDescriptor {
            tone: format!("tone {seed}"),
            color: "teal".into(),
        };
        let got = query_templates(&gw, &index, &descriptor, size).unwrap();
        let probe = gw.embed_image(&gw.assets().get(&gw.assets().refs()[0]).unwrap()).unwrap();
        let mut oracle: Vec<(String, f64)> =
            entries.iter().map(|(id, v)| (id.clone(), reference_cosine(probe.values(), v.values()))).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let got_ids: Vec<&str> = got.ranked.iter().map(|r| r.template_id.as_str()).collect();
        let want_ids: Vec<&str> = oracle.iter().map(|o| o.0.as_str()).collect();
        assert_eq!(got_ids, want_ids, "order at size {size}");
        for (r, (_, c)) in got.ranked.iter().zip(&oracle) {
            assert!((r.similarity - c).abs() <= 1e-9, "{}: {} vs {c}", r.template_id, r.similarity);
        }
        ties += oracle.windows(2).filter(|w| w[0].1 == w[1].1).count();
        let top = query_templates(&gw, &index, &descriptor, 5.min(size)).unwrap();
        assert_eq!(top.ranked[..], got.ranked[..5.min(size)], "top-k prefix at size {size}");
    }
    format!("sizes 10/100/1000 exact, {ties} tied neighbours")
}


// ---------------------------------------------------------------------------
// 5

fn persona_grid() -> String {
    let grid: BTreeSet<(Level, Level)> =
        [(Level::Low, Level::Low), (Level::Low, Level::High), (Level::High, Level::Low), (Level::High, Level::High)].into();
    let mut retries = 0;
    for n in 1..=20 {
        let dir = format!("briefs/{n:02}");
        let gw = Gateway::scripted(fixtures().join(&dir).join("scripted"));
        let (_, set) =
            persona::construct_panel(&gw, &brief(&format!("{dir}/brief.txt"))).unwrap_or_else(|e| panic!("brief {n}: {e}"));
        assert_eq!(set.personas.len(), 4, "brief {n}");
        let coords: BTreeSet<_> = set.personas.iter().map(|p| p.coords.expect("generated persona has coords")).collect();
        assert_eq!(coords, grid, "brief {n}");
        set.validate().unwrap();
        retries += gw.request_log().iter().filter(|r| r.tag == TAG_BUILD).count() - 1;
    }
    format!("20 briefs, 4 personas each, {retries} rejected builds retried")
}

// ---------------------------------------------------------------------------
// 6

fn scripted_case(case: &str) -> (Gateway, CanvasDocument, BriefExtract, PersonaSet) {
    let gw = Gateway::scripted(fixtures().join(case).join("scripted"));
    let doc = parse_document(&read(&format!("{case}/draft.json"))).unwrap();
    let (extract, set) = persona::construct_panel(&gw, &brief(&format!("{case}/brief.txt"))).unwrap();
    (gw, doc, extract, set)
}

fn guardrail_contract() -> String {
    let guarded = [TAG_GENERATE, TAG_QUESTION, TAG_ANSWER, TAG_CONCLUDE];
    let mut checked = 0;
    for case in ["cafe", "sports"] {
        let (gw, doc, extract, set) = scripted_case(case);
        let review = pipeline::review(&gw, &doc, &set, &extract).unwrap();
        pipeline::auto_discuss(&gw, &review, &set, &extract, &doc, discussion::DEFAULT_MAX_ROUNDS).unwrap();
        let mut seen = BTreeSet::new();
        for r in gw.request_log().iter().filter(|r| r.kind == RequestKind::Chat && guarded.contains(&r.tag.as_str())) {
            assert!(r.text.contains(&extract.raw_text), "{case}: {} attempt {} lacks the brief", r.tag, r.attempt);
            assert!(r.text.contains(&extract.goal), "{case}: {} attempt {} lacks the goal", r.tag, r.attempt);
            seen.insert(r.tag.clone());
            checked += 1;
        }
        assert_eq!(seen, guarded.iter().map(|t| t.to_string()).collect(), "{case}: not every request kind was exercised");
    }
    format!("{checked} requests over both sample cases")
}

// ---------------------------------------------------------------------------
// 7

fn conclusion_item(unit: &FeedbackUnit) -> FeedbackItem {
    let c = unit.conclusion.clone().expect("resolved unit carries a conclusion");
    FeedbackItem {
        item_id: "moderator.conclusion".into(),
        persona_id: "moderator".into(),
        target: c.target.clone(),
        kind: unit.kind,
        opinion: c.summary.clone(),
        preview: c.preview.clone(),
        rationale: c.summary,
    }
}

fn discussion_state_machine() -> String {
    let legal: BTreeMap<(&str, &str), &str> = [
        (("awaiting_comment", "comment"), "questioning"),
        (("concluded", "comment"), "questioning"),
        (("questioning", "ask questions"), "answering"),
        (("answering", "collect answers"), "concluding"),
        (("concluding", "conclude"), "concluded"),
    ]
    .into();
    let mut pairs = 0;
    for s in DiscussionState::ALL {
        for op in Operation::ALL {
            let (ss, os) = (s.to_string(), op.to_string());
            let want = legal.get(&(ss.as_str(), os.as_str())).copied();
            let got = discussion::transition(s, op).map(|n| n.to_string());
            assert_eq!(got.as_deref(), want, "({ss}, {os})");
            pairs += 1;
        }
    }
    assert_eq!(pairs, 20);

    // two personas disagree on the café promo line
    let (gw, doc, extract, set) = scripted_case("cafe");
    let review = pipeline::review(&gw, &doc, &set, &extract).unwrap();
    let unit = review.units.iter().find(|u| u.unit_id == "text:promo").expect("promo unit").clone();
    let report = &review.conflicts["text:promo"];
    let d = discussion::open_discussion(&unit, report, "d1", discussion::DEFAULT_MAX_ROUNDS).unwrap();
    let d = discussion::submit_comment(&d, None).unwrap();
    let (d, resolved) = discussion::advance(&gw, &d, &unit, &set, &extract, &doc).unwrap();
    let tags: Vec<RoleTag> = d.transcript.iter().map(|t| t.role_tag).collect();
    assert_eq!(
        tags,
        [
            RoleTag::CommentRequest,
            RoleTag::Question,
            RoleTag::Question,
            RoleTag::Answer,
            RoleTag::Answer,
            RoleTag::ConclusionStatement
        ]
    );
    assert_eq!(d.state, DiscussionState::Concluded);
    guardrail_check(&conclusion_item(&resolved), &doc).unwrap();

    // a fallback panel keeps disagreeing; rounds stop at the limit
    let gw = Gateway::fallback();
    let doc = parse_document(&read("sports/draft.json")).unwrap();
    let (extract, set) = persona::construct_panel(&gw, &brief("sports/brief.txt")).unwrap();
    let review = pipeline::review(&gw, &doc, &set, &extract).unwrap();
    let (uid, report) = review.conflicts.iter().next().expect("fallback panel disagrees somewhere");
    let unit = review.units.iter().find(|u| &u.unit_id == uid).unwrap().clone();
    let mut d = discussion::open_discussion(&unit, report, "d1", 5).unwrap();
    let mut rounds = 0;
    let limit = loop {
        assert!(rounds < 50, "discussion never stopped");
        let (next, resolved) = discussion::advance(&gw, &d, &unit, &set, &extract, &doc).unwrap();
        guardrail_check(&conclusion_item(&resolved), &doc).unwrap();
        rounds += 1;
        match discussion::submit_comment(&next, Some(&format!("consider angle {rounds}"))) {
            Ok(again) => d = again,
            Err(e) => break e,
        }
    };
    assert_eq!(limit, DiscussionError::RoundLimit(5));
    assert_eq!(rounds, 5);
    format!("{pairs} (state, operation) pairs, 6-turn flow, stopped after {rounds} rounds")
}

// ---------------------------------------------------------------------------
// 8

fn text_and_sources(doc: &CanvasDocument) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let (mut texts, mut sources) = (BTreeMap::new(), BTreeMap::new());
    for e in doc.elements() {
        if let Some(t) = e.text_content() {
            *texts.entry(t.to_string()).or_default() += 1;
        }
        if let Some(s) = e.image_source() {
            *sources.entry(s.to_string()).or_default() += 1;
        }
    }
    (texts, sources)
}

fn content_document(rng: &mut ChaCha8Rng) -> CanvasDocument {
    let mut elements: Vec<Element> = (0..rng.random_range(1..8))
        .map(|i| {
            let (x, y) = (f64::from(rng.random_range(0u32..500)), f64::from(rng.random_range(0u32..700)));
            let (w, h) = (f64::from(rng.random_range(20u32..300)), f64::from(rng.random_range(20u32..200)));
            let s = word(rng, b"abcdefgh XYZ", 1..16);
            if rng.random_bool(0.6) {
                Element::text(format!("c{i}"), x, y, w, h, s)
            } else {
                Element::image(format!("c{i}"), x, y, w, h, format!("images/{s}.png"))
            }
        })
        .collect();
    if rng.random_bool(0.5) {
        elements.push(Element::vector("deco", f64::from(rng.random_range(0u32..50)), 0.0, 40.0, 40.0, "<svg/>", 3));
    }
    CanvasDocument::new(600, 900, elements).unwrap()
}

fn theme_conservation() -> String {
    let (templates, warnings) = load_corpus(&fixtures().join("templates")).unwrap();
    assert!(warnings.is_empty(), "{warnings:?}");
    let templates: Vec<(String, CanvasDocument)> = templates.into_iter().collect();
    for (id, t) in &templates {
        let (stripped, emb) = extract_embellishments(t);
        assert!(stripped.elements().iter().all(|e| e.kind() != ElementKind::Vector), "{id} kept a vector");
        assert_eq!(&reinsert_embellishments(&stripped, &emb).unwrap(), t, "{id} embellishment round trip");
    }

    let gw = Gateway::fallback();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E4E);
    let mut docs: Vec<CanvasDocument> =
        ["cafe", "sports"].iter().map(|c| parse_document(&read(&format!("{c}/draft.json"))).unwrap()).collect();
    let mut pairs = Vec::new();
    for d in &docs {
        for t in &templates {
            pairs.push((d.clone(), t.clone()));
        }
    }
    while pairs.len() < 50 {
        let d = content_document(&mut rng);
        pairs.push((d.clone(), templates.choose(&mut rng).unwrap().clone()));
        docs.push(d);
    }
    let mut restyled = 0;
    for (n, (doc, (tid, template))) in pairs.iter().enumerate() {
        let out = apply_theme(&gw, doc, template, 3).unwrap_or_else(|e| panic!("pair {n} ({tid}): {e}"));
        assert_eq!(text_and_sources(&out.document), text_and_sources(doc), "pair {n} ({tid})");
        assert!(out.rounds <= 3, "pair {n}: {} rounds", out.rounds);
        restyled += usize::from(out.document != *doc);
    }
    for (n, doc) in docs.iter().enumerate() {
        let mut last = total_overlap_area(doc);
        for rounds in 1..=3 {
            let out = resolve_overlaps(&gw, doc, rounds).unwrap();
            assert!(out.rounds <= rounds, "doc {n}");
            let area = total_overlap_area(&out.document);
            assert!(area <= last, "doc {n} round {rounds}: {area} > {last}");
            last = area;
        }
    }
    assert_eq!(restyled, pairs.len(), "some themes left the document untouched");
    format!("{} pairs, {} templates, {} overlap runs", pairs.len(), templates.len(), docs.len())
}

// ---------------------------------------------------------------------------
// 9

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_posterpanel"))
}

fn batch_determinism() -> String {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut files = 0;
    for case in ["cafe", "sports"] {
        let golden = tree(&fixtures().join(case).join("golden"));
        for run in 0..3 {
            let out = tmp.path().join(format!("{case}-{run}"));
            let status = bin()
                .arg("run")
                .arg("--backend")
                .arg(format!("scripted:{}", fixtures().join(case).join("scripted").display()))
                .arg(fixtures().join(case).join("brief.txt"))
                .arg(fixtures().join(case).join("draft.json"))
                .arg("--out")
                .arg(&out)
                .stdout(Stdio::null())
                .status()
                .unwrap();
            assert!(status.success(), "{case} run {run}: {status}");
            let got = tree(&out);
            let names = |t: &BTreeMap<PathBuf, Vec<u8>>| t.keys().cloned().collect::<Vec<_>>();
            assert_eq!(names(&got), names(&golden), "{case} run {run}: file set");
            for (path, bytes) in &golden {
                assert!(got[path] == *bytes, "{case} run {run}: {} differs", path.display());
            }
            files = files.max(got.len());
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    format!("2 cases x 3 runs identical to the frozen output ({files} files max)")
}

// ---------------------------------------------------------------------------
// 10

struct Server {
    child: Child,
    base: String,
    http: reqwest::blocking::Client,
    accepted_posts: std::cell::Cell<usize>,
}

impl Server {
    fn start(data: &Path, index: &Path) -> Server {
        let mut child = bin()
            .args(["serve", "--backend", "fallback", "--bind", "127.0.0.1:0", "--data-dir"])
            .arg(data)
            .arg("--templates")
            .arg(fixtures().join("templates-mini"))
            .arg("--index")
            .arg(index)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
        Server {
            child,
            base,
            http: reqwest::blocking::Client::new(),
            accepted_posts: std::cell::Cell::new(0),
        }
    }

    fn call(&self, method: reqwest::Method, path: &str, body: Option<Value>) -> (u16, Value) {
        let is_post = method == reqwest::Method::POST;
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().unwrap();
        let status = resp.status().as_u16();
        if is_post && resp.status().is_success() {
            self.accepted_posts.set(self.accepted_posts.get() + 1);
        }
        (status, resp.json().unwrap_or(Value::Null))
    }

    fn get(&self, path: &str) -> Value {
        let (status, v) = self.call(reqwest::Method::GET, path, None);
        assert_eq!(status, 200, "GET {path}: {v}");
        v
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        self.call(reqwest::Method::POST, path, Some(body))
    }

    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn wait_ready(server: &Server, id: &str) {
    for _ in 0..1000 {
        match server.get(&format!("/sessions/{id}/status"))["status"]["state"].as_str() {
            Some("feedback_ready") => return,
            Some("failed") => panic!("session {id} failed"),
            _ => std::thread::sleep(Duration::from_millis(10)),
        }
    }
    panic!("session {id} never became ready");
}

/// A random sequence of user operations on one session. Rejected requests
/// (a second discussion, a missing template) are part of the mix.
fn random_ops(server: &Server, id: &str, rng: &mut ChaCha8Rng) -> usize {
    let ops = rng.random_range(2..9);
    for _ in 0..ops {
        let units = server.get(&format!("/sessions/{id}/units"))["units"].as_array().unwrap().clone();
        let unit = units.choose(rng).unwrap().clone();
        let uid = unit["unit_id"].as_str().unwrap();
        match rng.random_range(0..6) {
            0 => {
                let name = format!("Visitor {}", rng.random_range(0..1000));
                server.post(
                    &format!("/sessions/{id}/personas"),
                    json!({"name": name, "summary": "Walks past daily.", "background": "Lives nearby.",
                           "motivation": "Find something new.", "pain_point": "Little spare time.",
                           "need": "Clear details.", "quote": "Tell me quickly.", "rationale": "Added during review."}),
                );
            }
            1 => {
                let mut doc = server.get(&format!("/sessions/{id}/document"));
                let children = doc["children"].as_array_mut().unwrap();
                let texts: Vec<usize> = (0..children.len()).filter(|i| children[*i]["type"] == "text").collect();
                if let Some(i) = texts.choose(rng) {
                    children[*i]["text"] = json!(format!("Edited {}", rng.random_range(0..1000)));
                }
                if !children.is_empty() {
                    let i = rng.random_range(0..children.len());
                    children[i]["x"] = json!(rng.random_range(0..300));
                }
                server.post(&format!("/sessions/{id}/manual-edit"), doc);
            }
            2 => {
                server.post(&format!("/sessions/{id}/units/{uid}/discussion"), Value::Null);
            }
            3 => {
                let comment = if rng.random_bool(0.5) { json!({"comment": "Keep it friendly."}) } else { json!({}) };
                server.post(&format!("/sessions/{id}/units/{uid}/comment"), comment);
                server.post(&format!("/sessions/{id}/units/{uid}/advance"), Value::Null);
            }
            4 => {
                if let Some(item) = unit["items"].as_array().and_then(|items| items.choose(rng)) {
                    let r = item["item_id"].as_str().unwrap().to_string();
                    let (_, ranked) = server.post(&format!("/sessions/{id}/themes?k=1"), json!({"ref": r}));
                    let tid = ranked["ranked"][0]["template_id"].clone();
                    server.post(&format!("/sessions/{id}/accept"), json!({"ref": r, "template_id": tid}));
                }
            }
            _ => {
                let (status, d) = server.call(reqwest::Method::GET, &format!("/sessions/{id}/units/{uid}/discussion"), None);
                if status == 200 {
                    let r = format!("conclusion:{}:{}", d["discussion_id"].as_str().unwrap(), d["rounds_used"]);
                    server.post(&format!("/sessions/{id}/accept"), json!({"ref": r}));
                }
            }
        }
    }
    ops
}

fn crash_safety() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let index = tmp.path().join("index.json");
    let status = bin()
        .arg("ingest-templates")
        .arg(fixtures().join("templates-mini"))
        .arg("--out")
        .arg(&index)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "ingest-templates: {status}");

    let mut rng = ChaCha8Rng::seed_from_u64(0xDEAD);
    let mut sessions: Vec<String> = Vec::new();
    let (mut total_ops, mut succeeded, mut torn, mut dropped_snapshots) = (0, 0, 0, 0);
    let mut server = Server::start(&data, &index);
    for round in 0..10 {
        let case = *["cafe", "sports"].choose(&mut rng).unwrap();
        let body = json!({
            "brief": {"source_name": "brief.txt", "text": read(&format!("{case}/brief.txt"))},
            "draft": serde_json::from_str::<Value>(&read(&format!("{case}/draft.json"))).unwrap(),
        });
        let (status, created) = server.post("/sessions", body);
        assert_eq!(status, 202, "round {round}: {created}");
        let id = created["session_id"].as_str().unwrap().to_string();
        wait_ready(&server, &id);
        sessions.push(id.clone());
        total_ops += random_ops(&server, &id, &mut rng);
        // earlier sessions keep changing too
        let older = sessions.choose(&mut rng).unwrap().clone();
        total_ops += random_ops(&server, &older, &mut rng);

        let before: Vec<Value> = sessions.iter().map(|s| server.get(&format!("/sessions/{s}"))).collect();
        succeeded += server.accepted_posts.get();
        server.kill();

        let dir = data.join("sessions").join(&id);
        if rng.random_bool(0.5) {
            // a write cut short by the crash
            let mut f = std::fs::OpenOptions::new().append(true).open(dir.join("events.jsonl")).unwrap();
            f.write_all(br#"{"seq": 999999, "session_id": "#).unwrap();
            torn += 1;
        }
        if rng.random_bool(0.3) && dir.join("snapshot.json").exists() {
            std::fs::remove_file(dir.join("snapshot.json")).unwrap();
            dropped_snapshots += 1;
        }

        server = Server::start(&data, &index);
        for (s, want) in sessions.iter().zip(&before) {
            let got = server.get(&format!("/sessions/{s}"));
            assert!(got == *want, "round {round}: session {s} differs after restart");
        }
    }
    server.kill();
    assert!(succeeded > total_ops / 2, "only {succeeded} of {total_ops} operations were accepted");
    format!("10 sessions, {total_ops} operations ({succeeded} successful requests), 10 kills, {torn} torn writes, {dropped_snapshots} snapshots removed")
}
