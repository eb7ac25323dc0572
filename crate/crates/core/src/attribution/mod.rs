//! Author alignment between an authority list and a catalog, work-date
//! attribution through a text generator, and tolerance scoring.

mod dates;

use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

pub use dates::{
    attribute_dates, build_prompt, extract_year, load_cache, AttributionOptions, AttributionStatus, DateAttribution,
    GenerationError, TextGenerator, Work, PROMPT_TEMPLATE,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSource {
    Authority,
    Catalog,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorRecord {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub birth_year: Option<i32>,
    #[serde(default)]
    pub death_year: Option<i32>,
    pub source: RecordSource,
}

impl AuthorRecord {
    /// Splits catalog-style strings such as `"Dickens, Charles, 1812-1870"`
    /// into a name and life dates.
    pub fn from_catalog_string(id: impl Into<String>, raw: &str) -> Self {
        let (name, birth, death) = split_life_dates(raw);
        AuthorRecord {
            id: id.into(),
            name,
            birth_year: birth,
            death_year: death,
            source: RecordSource::Catalog,
        }
    }

    pub fn check(&self) -> Result<()> {
        if let (Some(b), Some(d)) = (self.birth_year, self.death_year) {
            if b >= d {
                return Err(Error::InvalidArgument(format!(
                    "author {}: birth {b} is not before death {d}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn split_life_dates(raw: &str) -> (String, Option<i32>, Option<i32>) {
    let trimmed = raw.trim().trim_end_matches([')', '.']);
    let tail_start = trimmed
        .rfind(|c: char| !(c.is_ascii_digit() || matches!(c, '-' | '–' | '?' | ' ')))
        .map(|i| i + trimmed[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(0);
    let tail = &trimmed[tail_start..];
    let years: Vec<Option<i32>> = tail
        .split(['-', '–'])
        .map(|p| p.trim().trim_end_matches('?').parse().ok())
        .collect();
    if tail.trim().is_empty() || years.iter().all(Option::is_none) {
        return (raw.trim().to_string(), None, None);
    }
    let name = trimmed[..tail_start]
        .trim()
        .trim_end_matches([',', '('])
        .trim()
        .to_string();
    let birth = years.first().copied().flatten();
    let death = if years.len() > 1 { years[1] } else { None };
    (name, birth, death)
}

/// Lowercase, strip diacritics and punctuation, and turn `"Last, First"`
/// into `"first last"`.
pub fn canonical_name(name: &str) -> String {
    let ordered = match name.split_once(',') {
        Some((last, first)) if !first.trim().is_empty() => format!("{} {}", first.trim(), last.trim()),
        _ => name.to_string(),
    };
    let folded: String = ordered
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Levenshtein distance of canonical names divided by the longer length.
pub fn name_distance(a: &str, b: &str) -> f64 {
    let (a, b) = (canonical_name(a), canonical_name(b));
    let len = a.chars().count().max(b.chars().count());
    if len == 0 {
        return 0.0;
    }
    strsim::levenshtein(&a, &b) as f64 / len as f64
}

/// `(comparable, agree)`: how many life dates are known on both sides and
/// whether all of those coincide.
pub fn date_comparison(a: &AuthorRecord, b: &AuthorRecord) -> (usize, bool) {
    let pairs = [(a.birth_year, b.birth_year), (a.death_year, b.death_year)];
    let mut n = 0;
    let mut agree = true;
    for (x, y) in pairs {
        if let (Some(x), Some(y)) = (x, y) {
            n += 1;
            agree &= x == y;
        }
    }
    (n, agree)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthorMatch {
    pub authority_id: String,
    pub catalog_id: String,
    pub pass: u8,
    pub name_distance: f64,
    pub date_agreement: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<AuthorMatch>,
    pub unmatched_catalog: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub pass1: f64,
    pub pass2: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds {
            pass1: 0.25,
            pass2: 0.10,
        }
    }
}

/// Two-pass alignment. Pass 1 accepts distance `<= pass1` when at least one
/// life date is comparable and all comparable dates agree; pass 2 accepts
/// remaining catalog authors at distance `<= pass2` on names alone. Each
/// catalog author takes its closest eligible authority (ties by id).
pub fn match_authors(
    authority: &[AuthorRecord],
    catalog: &[AuthorRecord],
    thresholds: MatchThresholds,
) -> Result<MatchResult> {
    if !(thresholds.pass2 <= thresholds.pass1) {
        return Err(Error::InvalidArgument(format!(
            "pass-2 threshold {} must not exceed pass-1 threshold {}",
            thresholds.pass2, thresholds.pass1
        )));
    }
    let canon_auth: Vec<String> = authority.iter().map(|a| canonical_name(&a.name)).collect();
    let mut result = MatchResult::default();
    let mut catalog_sorted: Vec<&AuthorRecord> = catalog.iter().collect();
    catalog_sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for cat in catalog_sorted {
        let canon = canonical_name(&cat.name);
        let mut best: [Option<(f64, &str, bool)>; 2] = [None, None];
        for (auth, cname) in authority.iter().zip(&canon_auth) {
            let len = canon.chars().count().max(cname.chars().count());
            let d = if len == 0 {
                0.0
            } else {
                strsim::levenshtein(&canon, cname) as f64 / len as f64
            };
            let (n, agree) = date_comparison(auth, cat);
            let eligible = [d <= thresholds.pass1 && n > 0 && agree, d <= thresholds.pass2];
            for (slot, ok) in best.iter_mut().zip(eligible) {
                let better = match slot {
                    None => true,
                    Some((bd, bid, _)) => d < *bd || (d == *bd && auth.id.as_str() < *bid),
                };
                if ok && better {
                    *slot = Some((d, &auth.id, n > 0 && agree));
                }
            }
        }
        let chosen = best[0].map(|b| (1u8, b)).or(best[1].map(|b| (2u8, b)));
        match chosen {
            Some((pass, (d, id, agree))) => result.matches.push(AuthorMatch {
                authority_id: id.to_string(),
                catalog_id: cat.id.clone(),
                pass,
                name_distance: d,
                date_agreement: agree,
            }),
            None => result.unmatched_catalog.push(cat.id.clone()),
        }
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub tolerance: i32,
    pub dq_delta: Option<i32>,
    /// Hits over scored items; 0 when nothing is scored.
    pub accuracy: f64,
    pub n_scored: usize,
    pub n_disqualified: usize,
    pub n_hits: usize,
    /// Scored items without a usable prediction, counted as misses.
    pub n_unparsed: usize,
}

/// Scores gold-labeled attributions. A prediction hits when it is within
/// `tolerance` years of any gold year; with `dq_delta`, predictions farther
/// than that from every gold year are removed from the denominator.
pub fn evaluate_attribution(
    attributions: &[DateAttribution],
    tolerance: i32,
    dq_delta: Option<i32>,
) -> Result<AttributionScore> {
    if tolerance < 0 {
        return Err(Error::InvalidArgument("tolerance must be non-negative".into()));
    }
    if let Some(dq) = dq_delta {
        if dq < tolerance {
            return Err(Error::InvalidArgument(format!(
                "dq_delta {dq} is below the tolerance {tolerance}"
            )));
        }
    }
    let gold: Vec<&DateAttribution> = attributions.iter().filter(|a| !a.gold_years.is_empty()).collect();
    if gold.is_empty() {
        return Err(Error::InvalidArgument("no gold-labeled attributions".into()));
    }
    let mut score = AttributionScore {
        tolerance,
        dq_delta,
        accuracy: 0.0,
        n_scored: 0,
        n_disqualified: 0,
        n_hits: 0,
        n_unparsed: 0,
    };
    for a in gold {
        let Some(pred) = a.predicted_year else {
            score.n_scored += 1;
            score.n_unparsed += 1;
            continue;
        };
        let dist = a
            .gold_years
            .iter()
            .map(|g| (pred - g).abs())
            .min()
            .expect("non-empty gold");
        if dq_delta.is_some_and(|dq| dist > dq) {
            score.n_disqualified += 1;
            continue;
        }
        score.n_scored += 1;
        score.n_hits += (dist <= tolerance) as usize;
    }
    if score.n_scored > 0 {
        score.accuracy = score.n_hits as f64 / score.n_scored as f64;
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, name: &str, b: Option<i32>, d: Option<i32>, source: RecordSource) -> AuthorRecord {
        AuthorRecord {
            id: id.into(),
            name: name.into(),
            birth_year: b,
            death_year: d,
            source,
        }
    }

    #[test]
    fn canonicalization() {
        assert_eq!(canonical_name("Twain, Mark"), "mark twain");
        assert_eq!(canonical_name("  Émile   Zola "), "emile zola");
        assert_eq!(canonical_name("Brontë, Charlotte"), "charlotte bronte");
        assert_eq!(name_distance("Twain, Mark", "Mark Twain"), 0.0);
        assert_eq!(name_distance("abc", "abd"), name_distance("abd", "abc"));
    }

    #[test]
    fn catalog_strings() {
        let r = AuthorRecord::from_catalog_string("c1", "Twain, Mark, 1835-1910");
        assert_eq!(
            (r.name.as_str(), r.birth_year, r.death_year),
            ("Twain, Mark", Some(1835), Some(1910))
        );
        let r = AuthorRecord::from_catalog_string("c2", "Twain, Mark (1835–1910)");
        assert_eq!(
            (r.name.as_str(), r.birth_year, r.death_year),
            ("Twain, Mark", Some(1835), Some(1910))
        );
        let r = AuthorRecord::from_catalog_string("c3", "Anonymous");
        assert_eq!((r.name.as_str(), r.birth_year), ("Anonymous", None));
        let r = AuthorRecord::from_catalog_string("c4", "Smith, John, 1801-");
        assert_eq!((r.birth_year, r.death_year), (Some(1801), None));
    }

    #[test]
    fn twain_matches_in_first_pass() {
        let auth = vec![rec(
            "Q7245",
            "Mark Twain",
            Some(1835),
            Some(1910),
            RecordSource::Authority,
        )];
        let cat = vec![AuthorRecord::from_catalog_string("pg53", "Twain, Mark (1835–1910)")];
        let res = match_authors(&auth, &cat, MatchThresholds::default()).unwrap();
        assert_eq!(res.matches.len(), 1);
        assert_eq!(res.matches[0].pass, 1);
        assert!(res.matches[0].date_agreement);
    }

    #[test]
    fn date_veto_blocks_first_pass() {
        let auth = vec![rec("a", "John Smith", Some(1700), Some(1760), RecordSource::Authority)];
        let cat = vec![rec("c", "Smith, John", Some(1850), Some(1900), RecordSource::Catalog)];
        let res = match_authors(&auth, &cat, MatchThresholds::default()).unwrap();
        assert!(res.matches.iter().all(|m| m.pass != 1));
        let strict = MatchThresholds {
            pass1: 0.25,
            pass2: -1.0,
        };
        let res = match_authors(&auth, &cat, strict).unwrap();
        assert!(res.matches.is_empty());
        assert_eq!(res.unmatched_catalog, vec!["c".to_string()]);
    }

    #[test]
    fn threshold_order_is_checked() {
        assert!(match_authors(&[], &[], MatchThresholds { pass1: 0.1, pass2: 0.2 }).is_err());
    }

    fn attr(pred: Option<i32>, gold: &[i32]) -> DateAttribution {
        DateAttribution {
            work_id: "w".into(),
            predicted_year: pred,
            gold_years: gold.to_vec(),
            raw_response: String::new(),
            status: if pred.is_some() {
                AttributionStatus::Parsed
            } else {
                AttributionStatus::Unparseable
            },
            attempts: 1,
        }
    }

    #[test]
    fn scoring_rules() {
        let s = evaluate_attribution(&[attr(Some(1850), &[1851])], 1, None).unwrap();
        assert_eq!(s.accuracy, 1.0);
        let s = evaluate_attribution(&[attr(Some(1900), &[1840]), attr(Some(1841), &[1840])], 1, Some(50)).unwrap();
        assert_eq!((s.n_disqualified, s.n_scored, s.accuracy), (1, 1, 1.0));
        let s = evaluate_attribution(&[attr(Some(1860), &[1840, 1859])], 1, None).unwrap();
        assert_eq!(s.n_hits, 1);
        let s = evaluate_attribution(&[attr(None, &[1840]), attr(Some(1840), &[1840])], 1, Some(50)).unwrap();
        assert_eq!((s.n_unparsed, s.accuracy), (1, 0.5));
        assert!(evaluate_attribution(&[attr(Some(1), &[])], 1, None).is_err());
        assert!(evaluate_attribution(&[attr(Some(1), &[1])], 10, Some(5)).is_err());
    }
}
