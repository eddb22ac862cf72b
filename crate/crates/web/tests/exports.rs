use codebias_web::{analyze_source_json, cond_idf_profile_json, train_and_attribute_json};
use serde_json::Value;

const SNIPPET: &str = "fn f(a) { var total = 0; if (a) { total = 1; } else { total = 2; } return total; }";

#[test]
fn analyze_source_reports_tokens_blocks_and_paths() {
    let v: Value = serde_json::from_str(&analyze_source_json(SNIPPET).unwrap()).unwrap();
    let tokens = v["tokens"].as_array().unwrap();
    assert!(tokens.iter().any(|t| t["text"] == "total"));
    let n = v["blocks"].as_array().unwrap().len();
    assert!(n >= 3);
    let dist = v["dist"].as_array().unwrap();
    assert_eq!(dist.len(), n);
    let entry = v["entry"].as_u64().unwrap() as usize;
    let exit = v["exit"].as_u64().unwrap() as usize;
    assert!(!dist[entry][exit].is_null());
    for p in v["paths"].as_array().unwrap() {
        let blocks = p["blocks"].as_array().unwrap();
        let (u, w) = (p["from"].as_u64().unwrap() as usize, p["to"].as_u64().unwrap() as usize);
        assert_eq!(blocks.len() as u64 - 1, dist[u][w].as_u64().unwrap());
    }
}

#[test]
fn analyze_source_rejects_garbage() {
    assert!(analyze_source_json("fn (").is_err());
    assert!(analyze_source_json("fn f() { var x = # ; }").is_err());
}

#[test]
fn profile_ranks_planted_words_for_the_label() {
    let v: Value = serde_json::from_str(&cond_idf_profile_json("vulndet", 0.9, 3, 1, 15).unwrap()).unwrap();
    assert_eq!(v["label"], "vulnerable");
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 15);
    let scores: Vec<f64> = rows.iter().map(|r| r["cond_idf"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(rows.iter().any(|r| r["bias"] == true));
    assert!(cond_idf_profile_json("sorting", 0.9, 3, 0, 5).is_err());
}

#[test]
fn train_and_attribute_returns_overlays() {
    let v: Value = serde_json::from_str(&train_and_attribute_json("typeinf", 0.9, 2, 4).unwrap()).unwrap();
    for k in ["intra", "inter", "top3_contains"] {
        let x = v[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{k} = {x}");
    }
    assert_eq!(v["train_loss"].as_array().unwrap().len(), 2);
    let samples = v["samples"].as_array().unwrap();
    assert!(!samples.is_empty() && samples.len() <= 6);
    for s in samples {
        let n = s["tokens"].as_array().unwrap().len();
        assert_eq!(s["weights"].as_array().unwrap().len(), n);
        assert_eq!(s["biased"].as_array().unwrap().len(), n);
    }
}

#[test]
fn outputs_are_deterministic() {
    assert_eq!(
        cond_idf_profile_json("typeinf", 0.5, 8, 0, 10).unwrap(),
        cond_idf_profile_json("typeinf", 0.5, 8, 0, 10).unwrap()
    );
}
