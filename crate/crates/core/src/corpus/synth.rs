//! Synthetic one-to-many product-description corpus.
//!
//! Each item draws one value per attribute slot. The source stacks every
//! attribute as keywords; each target realizes a different template that
//! mentions only a subset of the attributes, so the targets of one source are
//! lexically diverse while staying consistent with it.

use crate::corpus::OneToManyExample;
use crate::numeric::Rng;

const SLOTS: [(&str, &[&str]); 7] = [
    ("category", &["dress", "shirt", "skirt", "coat", "jacket", "sweater", "blouse", "hoodie"]),
    ("color", &["red", "blue", "black", "white", "green", "beige", "pink", "grey"]),
    ("material", &["linen", "cotton", "silk", "wool", "denim", "leather"]),
    ("style", &["casual", "elegant", "vintage", "sporty", "minimalist", "bohemian"]),
    ("season", &["spring", "summer", "autumn", "winter"]),
    ("pattern", &["floral", "striped", "plain", "plaid", "dotted"]),
    ("fit", &["slim", "loose", "cropped", "oversized", "tailored"]),
];

const TEMPLATES: [&str; 8] = [
    "this {color} {category} brightens any outfit",
    "soft {material} makes this {category} comfortable all day",
    "a {style} {category} for every occasion",
    "perfect for {season} days with its {pattern} design",
    "the {fit} cut flatters your figure",
    "{color} and {material} create a {style} look",
    "stay comfortable this {season} in {material}",
    "a {pattern} {category} with a {fit} silhouette",
];

pub fn num_templates() -> usize {
    TEMPLATES.len()
}

fn realize(template: &str, values: &[&str]) -> Vec<String> {
    template
        .split_whitespace()
        .map(|word| {
            match word
                .strip_prefix('{')
                .and_then(|w| w.strip_suffix('}'))
                .and_then(|slot| SLOTS.iter().position(|(name, _)| *name == slot))
            {
                Some(i) => values[i].to_string(),
                None => word.to_string(),
            }
        })
        .collect()
}

/// `n_items` examples with `targets_per_item` targets each, fully determined by `seed`.
/// Targets of one item use distinct templates while there are templates left.
pub fn synth_generate(n_items: usize, targets_per_item: usize, seed: u64) -> Vec<OneToManyExample> {
    assert!(n_items >= 1 && targets_per_item >= 1);
    let mut rng = Rng::new(seed);
    (0..n_items)
        .map(|_| {
            let values: Vec<&str> = SLOTS.iter().map(|(_, vals)| vals[rng.below(vals.len())]).collect();
            let source = values.iter().map(|v| v.to_string()).collect();
            let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
            rng.shuffle(&mut order);
            let targets = (0..targets_per_item)
                .map(|k| realize(TEMPLATES[order[k % order.len()]], &values))
                .collect();
            OneToManyExample { source, targets }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_item_single_target() {
        let c = synth_generate(1, 1, 0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].targets.len(), 1);
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_generate(20, 3, 5), synth_generate(20, 3, 5));
        assert_ne!(synth_generate(20, 3, 5), synth_generate(20, 3, 6));
    }

    #[test]
    fn slot_space_is_wide_enough() {
        assert!(SLOTS.len() >= 4);
        assert!(SLOTS.iter().all(|(_, v)| v.len() >= 4));
        assert!(SLOTS.iter().filter(|(_, v)| v.len() >= 5).count() >= 4);
    }

    #[test]
    fn targets_are_attribute_consistent() {
        let c = synth_generate(500, 4, 1);
        let pairs: usize = c.iter().map(|e| e.targets.len()).sum();
        assert_eq!(pairs, 2000);
        for ex in &c {
            for t in &ex.targets {
                assert!(t.iter().any(|w| ex.source.contains(w)), "{t:?} vs {:?}", ex.source);
            }
            let distinct: std::collections::HashSet<_> = ex.targets.iter().collect();
            assert_eq!(distinct.len(), ex.targets.len());
        }
    }
}
