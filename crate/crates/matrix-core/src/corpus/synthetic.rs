//! Deterministic synthetic corpora for offline end-to-end runs.
//!
//! Each instance is a small invoice whose transport reference sits in a
//! family-specific element (`<AlphaRouteRef>`, `<BetaRouteRef>`, ...). The
//! family tag is the textual pattern an agent has to learn; the scripted
//! backend keys its replies on the same tags, which makes a full
//! train-and-evaluate cycle runnable with no network and no model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use super::{Dataset, InvoiceDocument, TaskInstance, DEFAULT_QUERY};

/// Pattern-family names, in fixed order. `generate_synthetic_corpus` uses a
/// prefix of this list.
pub const FAMILY_NAMES: [&str; 16] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
    "lambda", "mu", "nu", "xi", "omicron", "pi",
];

const SUPPLIERS: [&str; 10] = [
    "Nordwind Logistics GmbH",
    "Cargolux Freight BV",
    "Helios Shipping SA",
    "Baltic Crate and Co",
    "Transalpina Srl",
    "Vesta Carriers Oy",
    "Meridian Haulage Ltd",
    "Polaris Spedition AG",
    "Atlantica Transporte SL",
    "Orion Freightways ApS",
];

const CITIES: [&str; 12] = [
    "Hamburg",
    "Rotterdam",
    "Antwerp",
    "Gdansk",
    "Valencia",
    "Genoa",
    "Piraeus",
    "Aarhus",
    "Bilbao",
    "Trieste",
    "Riga",
    "Bremerhaven",
];

/// Element tag that carries the reference for `family` (e.g. `AlphaRouteRef`).
pub fn family_tag(family: &str) -> String {
    let mut chars = family.chars();
    let head = chars
        .next()
        .map(|c| c.to_uppercase().to_string())
        .unwrap_or_default();
    format!("{head}{}RouteRef", chars.as_str())
}

/// Marker token a distilled insight for `family` ends with. These tokens
/// never appear in documents, only in memory and reflections, so their
/// presence in a prompt proves the memory path is live.
pub fn family_hint(family: &str) -> String {
    format!("(strategy-{family})")
}

/// Prefix of every reference in `family` (e.g. `REF-ALPHA-`).
pub fn reference_prefix(family: &str) -> String {
    format!("REF-{}-", family.to_uppercase())
}

/// Recover the family from a generated task id (`alpha-0007` → `alpha`).
pub fn family_of_id(id: &str) -> Option<&'static str> {
    FAMILY_NAMES
        .iter()
        .find(|f| id.len() > f.len() && id.starts_with(*f) && id.as_bytes()[f.len()] == b'-')
        .copied()
}

/// Generate `families * per_family` instances, `per_family` per pattern
/// family, deterministically in `seed`. Every instance has a ground-truth
/// answer and the answer occurs verbatim in its document.
pub fn generate_synthetic_corpus(families: usize, per_family: usize, seed: u64) -> Dataset {
    assert!(
        (1..=FAMILY_NAMES.len()).contains(&families),
        "families must be in 1..={}",
        FAMILY_NAMES.len()
    );
    assert!(per_family >= 1, "per_family must be positive");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used_refs = BTreeSet::new();
    let mut instances = Vec::with_capacity(families * per_family);

    for family in &FAMILY_NAMES[..families] {
        let tag = family_tag(family);
        let prefix = reference_prefix(family);
        for i in 0..per_family {
            let number = loop {
                let n: u32 = rng.gen_range(0..100_000);
                if used_refs.insert(n) {
                    break n;
                }
            };
            let reference = format!("{prefix}{number:05}");
            let id = format!("{family}-{i:04}");
            let xml_text = render_invoice(&mut rng, &id, &tag, &reference);
            instances.push(TaskInstance {
                id: id.clone(),
                document: InvoiceDocument::new(id, xml_text),
                query: DEFAULT_QUERY.to_string(),
                answer: Some(reference),
            });
        }
    }

    Dataset {
        name: format!("synthetic-{families}x{per_family}"),
        instances,
    }
}

fn render_invoice(rng: &mut ChaCha8Rng, id: &str, tag: &str, reference: &str) -> String {
    let supplier = SUPPLIERS[rng.gen_range(0..SUPPLIERS.len())];
    let from = CITIES[rng.gen_range(0..CITIES.len())];
    let to = CITIES[rng.gen_range(0..CITIES.len())];
    let month = rng.gen_range(1..=12u32);
    let day = rng.gen_range(1..=28u32);
    let euros = rng.gen_range(50..5000u32);
    let cents = rng.gen_range(0..100u32);
    let invoice_no = rng.gen_range(10_000..100_000u32);
    format!(
        r#"<Invoice xmlns:cbc="urn:oasis:names:specification:ubl:schema:xsd:CommonBasicComponents-2">
  <cbc:ID>INV-{invoice_no}</cbc:ID>
  <cbc:IssueDate>2024-{month:02}-{day:02}</cbc:IssueDate>
  <cbc:Note>synthetic fixture {id}</cbc:Note>
  <Supplier>{supplier}</Supplier>
  <Route>{from} to {to}</Route>
  <Delivery>
    <{tag}>{reference}</{tag}>
  </Delivery>
  <cbc:Amount currencyID="EUR">{euros}.{cents:02}</cbc:Amount>
</Invoice>
"#
    )
}
