use chronolm::attribution::{match_authors, AuthorRecord, MatchThresholds, RecordSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GIVEN: [&str; 10] = [
    "Anne", "Charles", "Élise", "George", "Harriet", "James", "Louisa", "Mary", "René", "William",
];
const FAMILY: [&str; 5] = ["Brontë", "Dickens", "Gaskell", "Hardy", "Thackeray"];

fn record(id: String, name: String, birth: Option<i32>, death: Option<i32>, source: RecordSource) -> AuthorRecord {
    AuthorRecord {
        id,
        name,
        birth_year: birth,
        death_year: death,
        source,
    }
}

/// 50 authority authors and a catalog of reordered, misspelt, redated
/// and unrelated variants.
fn fixture() -> (Vec<AuthorRecord>, Vec<AuthorRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut authority = Vec::new();
    for (i, g) in GIVEN.iter().enumerate() {
        for (j, f) in FAMILY.iter().enumerate() {
            let born = 1780 + (i * 5 + j) as i32;
            let id = format!("a{:02}", authority.len());
            authority.push(record(
                id,
                format!("{g} {f}"),
                Some(born),
                Some(born + 50 + j as i32),
                RecordSource::Authority,
            ));
        }
    }
    let mut catalog = Vec::new();
    for (k, a) in authority.iter().enumerate() {
        let (g, f) = a.name.split_once(' ').unwrap();
        let mut name = match rng.gen_range(0..4) {
            0 => a.name.clone(),
            1 => format!("{f}, {g}"),
            2 => format!("{}, {}.", f.to_uppercase(), g),
            _ => format!("{g} {f}"),
        };
        if rng.gen_bool(0.3) {
            let mut chars: Vec<char> = name.chars().collect();
            let p = rng.gen_range(0..chars.len());
            chars[p] = 'x';
            name = chars.into_iter().collect();
        }
        let (birth, death) = match rng.gen_range(0..4) {
            0 => (a.birth_year, a.death_year),
            1 => (a.birth_year, None),
            2 => (None, None),
            _ => (a.birth_year.map(|b| b + 1), a.death_year),
        };
        catalog.push(record(format!("c{k:02}"), name, birth, death, RecordSource::Catalog));
    }
    catalog.push(record(
        "c90".into(),
        "Nobody Inparticular".into(),
        Some(1800),
        None,
        RecordSource::Catalog,
    ));
    catalog.push(record("c91".into(), "".into(), None, None, RecordSource::Catalog));
    (authority, catalog)
}

fn fold(c: char) -> char {
    match c {
        'é' | 'É' => 'e',
        'ë' | 'Ë' => 'e',
        _ => c.to_ascii_lowercase(),
    }
}

fn canon(name: &str) -> Vec<char> {
    let ordered = match name.split_once(',') {
        Some((l, f)) if !f.trim().is_empty() => format!("{} {}", f.trim(), l.trim()),
        _ => name.to_string(),
    };
    let mapped: String = ordered
        .chars()
        .map(fold)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .collect()
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut row = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            row.push((prev[j] + usize::from(ca != cb)).min(prev[j + 1] + 1).min(row[j] + 1));
        }
        prev = row;
    }
    prev[b.len()]
}

type Expected = Vec<(String, Option<(String, u8)>)>;

fn brute_force(authority: &[AuthorRecord], catalog: &[AuthorRecord], t: MatchThresholds) -> Expected {
    let mut out = Vec::new();
    let mut cats: Vec<&AuthorRecord> = catalog.iter().collect();
    cats.sort_by(|a, b| a.id.cmp(&b.id));
    for c in cats {
        let mut scored = Vec::new();
        for a in authority {
            let (x, y) = (canon(&c.name), canon(&a.name));
            let len = x.len().max(y.len());
            let d = if len == 0 {
                0.0
            } else {
                levenshtein(&x, &y) as f64 / len as f64
            };
            let known: Vec<bool> = [(a.birth_year, c.birth_year), (a.death_year, c.death_year)]
                .iter()
                .filter_map(|p| match p {
                    (Some(u), Some(v)) => Some(u == v),
                    _ => None,
                })
                .collect();
            let dated = !known.is_empty() && known.iter().all(|&k| k);
            scored.push((d, a.id.clone(), dated));
        }
        scored.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)));
        let first = scored.iter().find(|s| s.0 <= t.pass1 && s.2).map(|s| (s.1.clone(), 1));
        let second = || scored.iter().find(|s| s.0 <= t.pass2).map(|s| (s.1.clone(), 2));
        out.push((c.id.clone(), first.or_else(second)));
    }
    out
}

#[test]
fn fifty_authors_match_all_pairs_scoring() {
    let (authority, catalog) = fixture();
    assert_eq!(authority.len(), 50);
    for t in [
        MatchThresholds::default(),
        MatchThresholds { pass1: 0.4, pass2: 0.2 },
        MatchThresholds { pass1: 0.1, pass2: 0.0 },
    ] {
        let got = match_authors(&authority, &catalog, t).unwrap();
        let mut actual: Expected = got
            .matches
            .iter()
            .map(|m| (m.catalog_id.clone(), Some((m.authority_id.clone(), m.pass))))
            .collect();
        actual.extend(got.unmatched_catalog.iter().map(|c| (c.clone(), None)));
        actual.sort();
        let mut expected = brute_force(&authority, &catalog, t);
        expected.sort();
        assert_eq!(actual, expected, "thresholds {t:?}");
    }
}

#[test]
fn fixture_exercises_both_passes_and_misses() {
    let (authority, catalog) = fixture();
    let r = match_authors(&authority, &catalog, MatchThresholds::default()).unwrap();
    assert!(r.matches.iter().any(|m| m.pass == 1));
    assert!(r.matches.iter().any(|m| m.pass == 2));
    assert!(r.unmatched_catalog.contains(&"c90".to_string()));
}
