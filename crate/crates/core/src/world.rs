//! Procedural scene world: object catalog, grid scenes, deterministic
//! feature rendering, the shared toy vocabulary, captions, and the
//! caption-image similarity oracle.
//!
//! Rendering is the pixel stand-in: every (category, attribute, position)
//! triple owns a seeded pseudo-random unit basis vector, a scene renders to
//! the L2-normalized sum of its slots' bases, and similarity is the cosine
//! between a caption's re-rendered scene and an image. That preserves the
//! one property the pair filter needs: a caption-image score whose argmax
//! is meaningful.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    RenderedImage, TokenId, TokenSeq, EOS_TOKEN, NO_TOKEN, RESERVED_TOKENS, YES_TOKEN,
};
use crate::tensor::sha256_hex;

// ── Catalog ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectedness {
    Conventional,
    Unconventional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub class: Expectedness,
}

/// One allowed substitution `from -> to` with a short rationale tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementRule {
    pub from: String,
    pub to: String,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub attributes: Vec<String>,
    pub categories: Vec<Category>,
    pub replacements: Vec<ReplacementRule>,
}

impl Catalog {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Config("catalog needs at least one attribute".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate category {:?}", c.name)));
            }
        }
        let mut attrs = std::collections::BTreeSet::new();
        for a in &self.attributes {
            if !attrs.insert(a.as_str()) {
                return Err(Error::Config(format!("duplicate attribute {a:?}")));
            }
        }
        if !self
            .categories
            .iter()
            .any(|c| c.class == Expectedness::Conventional)
        {
            return Err(Error::Config(
                "catalog needs at least one conventional category".into(),
            ));
        }
        for r in &self.replacements {
            if r.from == r.to {
                return Err(Error::Config(format!(
                    "replacement table must be irreflexive, got {} -> {}",
                    r.from, r.to
                )));
            }
            for name in [&r.from, &r.to] {
                if self.category_index(name).is_none() {
                    return Err(Error::Config(format!(
                        "replacement references unknown category {name:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn category_name(&self, index: usize) -> &str {
        &self.categories[index].name
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn conventional_indices(&self) -> Vec<usize> {
        self.categories
            .iter()
            .enumerate()
            .filter(|(_, c)| c.class == Expectedness::Conventional)
            .map(|(i, _)| i)
            .collect()
    }

    /// Substitutes for a category, in table order: `(new index, tag)`.
    pub fn substitutes_of(&self, category: usize) -> Vec<(usize, &str)> {
        let name = self.category_name(category);
        self.replacements
            .iter()
            .filter(|r| r.from == name)
            .filter_map(|r| self.category_index(&r.to).map(|i| (i, r.tag.as_str())))
            .collect()
    }

    pub fn has_replacement(&self, old: usize, new: usize) -> bool {
        let from = self.category_name(old);
        let to = self.category_name(new);
        self.replacements
            .iter()
            .any(|r| r.from == from && r.to == to)
    }

    pub fn from_json(text: &str) -> Result<Catalog> {
        let catalog: Catalog = serde_json::from_str(text)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The built-in world: eight everyday object kinds, eight out-of-place
    /// substitutes, four color attributes.
    pub fn default_catalog() -> Catalog {
        let conventional = [
            "train", "church", "car", "tree", "dog", "table", "boat", "horse",
        ];
        let unconventional = [
            "elephant",
            "spaceship",
            "dinosaur",
            "robot",
            "whale",
            "piano",
            "iceberg",
            "volcano",
        ];
        let mut categories: Vec<Category> = conventional
            .iter()
            .map(|name| Category {
                name: (*name).into(),
                class: Expectedness::Conventional,
            })
            .collect();
        categories.extend(unconventional.iter().map(|name| Category {
            name: (*name).into(),
            class: Expectedness::Unconventional,
        }));
        let rules = [
            ("train", "elephant", "scale-shift"),
            ("train", "spaceship", "era-shift"),
            ("church", "volcano", "nature-swap"),
            ("church", "piano", "scale-shift"),
            ("car", "whale", "habitat-swap"),
            ("car", "dinosaur", "era-shift"),
            ("tree", "robot", "nature-swap"),
            ("tree", "iceberg", "habitat-swap"),
            ("dog", "dinosaur", "era-shift"),
            ("dog", "robot", "nature-swap"),
            ("table", "iceberg", "habitat-swap"),
            ("table", "whale", "habitat-swap"),
            ("boat", "piano", "function-swap"),
            ("boat", "volcano", "nature-swap"),
            ("horse", "spaceship", "era-shift"),
            ("horse", "elephant", "scale-shift"),
        ];
        let catalog = Catalog {
            attributes: vec![
                "red".into(),
                "blue".into(),
                "green".into(),
                "yellow".into(),
            ],
            categories,
            replacements: rules
                .iter()
                .map(|(from, to, tag)| ReplacementRule {
                    from: (*from).into(),
                    to: (*to).into(),
                    tag: (*tag).into(),
                })
                .collect(),
        };
        catalog.validate().expect("built-in catalog is valid");
        catalog
    }
}

// ── Scenes ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placed {
    pub category: usize,
    pub attribute: usize,
}

/// An object layout on a W x H grid. Slot iteration is row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    width: usize,
    height: usize,
    slots: BTreeMap<GridPos, Placed>,
}

pub const DEFAULT_GRID: (usize, usize) = (4, 4);

impl Scene {
    pub fn new(width: usize, height: usize) -> Result<Scene> {
        if width == 0 || height == 0 {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        Ok(Scene {
            width,
            height,
            slots: BTreeMap::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn place(&mut self, pos: GridPos, placed: Placed) -> Result<()> {
        if pos.row >= self.height || pos.col >= self.width {
            return Err(Error::Input(format!(
                "position {pos:?} outside {}x{} grid",
                self.width, self.height
            )));
        }
        self.slots.insert(pos, placed);
        Ok(())
    }

    pub fn get(&self, pos: GridPos) -> Option<Placed> {
        self.slots.get(&pos).copied()
    }

    pub fn occupied(&self) -> impl Iterator<Item = (GridPos, Placed)> + '_ {
        self.slots.iter().map(|(p, s)| (*p, *s))
    }

    pub fn occupancy(&self) -> usize {
        self.slots.len()
    }

    pub fn contains_category(&self, category: usize) -> bool {
        self.slots.values().any(|p| p.category == category)
    }

    pub fn categories(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.slots.values().map(|p| p.category).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Hex digest over the canonical name-resolved layout string.
    pub fn digest(&self, catalog: &Catalog) -> String {
        let mut text = format!("{}x{}", self.width, self.height);
        for (pos, placed) in self.occupied() {
            text.push_str(&format!(
                "|{},{}={}/{}",
                pos.row,
                pos.col,
                catalog.attributes[placed.attribute],
                catalog.category_name(placed.category),
            ));
        }
        sha256_hex(text.as_bytes())
    }
}

/// Stable multi-part seed mixing (splitmix64 chain), used everywhere a
/// derived RNG stream is needed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    let mut h = 0x8E5BA3F4A1C9D2E7u64;
    for p in parts {
        h = splitmix64(h ^ splitmix64(*p));
    }
    h
}

/// Deterministic placement of `occupancy` conventional objects.
pub fn gen_scene(
    seed: u64,
    catalog: &Catalog,
    width: usize,
    height: usize,
    occupancy: usize,
) -> Result<Scene> {
    if occupancy == 0 || occupancy > width * height {
        return Err(Error::Input(format!(
            "occupancy {occupancy} out of range 1..={}",
            width * height
        )));
    }
    let conventional = catalog.conventional_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5CE4E]));
    let mut cells: Vec<usize> = (0..width * height).collect();
    // Partial Fisher-Yates for the occupied cells.
    for i in 0..occupancy {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    let mut scene = Scene::new(width, height)?;
    for &cell in cells.iter().take(occupancy) {
        let category = conventional[rng.gen_range(0..conventional.len())];
        let attribute = rng.gen_range(0..catalog.attributes.len());
        scene.place(
            GridPos {
                row: cell / width,
                col: cell % width,
            },
            Placed {
                category,
                attribute,
            },
        )?;
    }
    Ok(scene)
}

// ── Rendering and similarity ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub d_v: usize,
    pub seed: u64,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 kept away from zero.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// The seeded unit basis vector owned by one (category, attribute, position).
fn basis_vector(rc: &RenderConfig, placed: Placed, pos: GridPos) -> Vec<f64> {
    let seed = mix_seed(&[
        rc.seed,
        placed.category as u64,
        placed.attribute as u64,
        pos.row as u64,
        pos.col as u64,
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..rc.d_v).map(|_| standard_normal(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// L2-normalized sum of the slot basis vectors. Identical scenes render
/// bit-identically.
pub fn render(scene: &Scene, rc: &RenderConfig) -> RenderedImage {
    let mut acc = vec![0.0; rc.d_v];
    for (pos, placed) in scene.occupied() {
        let basis = basis_vector(rc, placed, pos);
        for (a, b) in acc.iter_mut().zip(&basis) {
            *a += b;
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut acc {
            *x /= norm;
        }
    }
    RenderedImage::new(acc).expect("normalized render is unit or zero")
}

// ── Vocabulary ───────────────────────────────────────────────────────

pub const IS_TOKEN: TokenId = RESERVED_TOKENS;
pub const THERE_TOKEN: TokenId = RESERVED_TOKENS + 1;
pub const A_TOKEN: TokenId = RESERVED_TOKENS + 2;
pub const AT_TOKEN: TokenId = RESERVED_TOKENS + 3;
pub const DESCRIBE_TOKEN: TokenId = RESERVED_TOKENS + 4;

/// The closed token space shared by the policy and the data pipeline:
/// reserved ids, grammar words, attributes, categories, then grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    attr_base: usize,
    cat_base: usize,
    pos_base: usize,
    n_attrs: usize,
    n_cats: usize,
    width: usize,
    height: usize,
}

impl Vocabulary {
    pub fn build(catalog: &Catalog, width: usize, height: usize) -> Vocabulary {
        let mut words: Vec<String> = ["<pad>", "<bos>", "<eos>", "yes", "no"]
            .iter()
            .map(|s| (*s).to_string())
            .collect();
        words.extend(
            ["is", "there", "a", "at", "describe"]
                .iter()
                .map(|s| (*s).to_string()),
        );
        let attr_base = words.len();
        words.extend(catalog.attributes.iter().cloned());
        let cat_base = words.len();
        words.extend(catalog.categories.iter().map(|c| c.name.clone()));
        let pos_base = words.len();
        for row in 0..height {
            for col in 0..width {
                words.push(format!("r{row}c{col}"));
            }
        }
        Vocabulary {
            words,
            attr_base,
            cat_base,
            pos_base,
            n_attrs: catalog.attributes.len(),
            n_cats: catalog.categories.len(),
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, token: TokenId) -> Option<&str> {
        self.words.get(token).map(|s| s.as_str())
    }

    pub fn attribute_token(&self, attr: usize) -> TokenId {
        debug_assert!(attr < self.n_attrs);
        self.attr_base + attr
    }

    pub fn category_token(&self, category: usize) -> TokenId {
        debug_assert!(category < self.n_cats);
        self.cat_base + category
    }

    pub fn position_token(&self, pos: GridPos) -> TokenId {
        debug_assert!(pos.row < self.height && pos.col < self.width);
        self.pos_base + pos.row * self.width + pos.col
    }

    pub fn category_of_token(&self, token: TokenId) -> Option<usize> {
        (self.cat_base..self.cat_base + self.n_cats)
            .contains(&token)
            .then(|| token - self.cat_base)
    }

    pub fn attribute_of_token(&self, token: TokenId) -> Option<usize> {
        (self.attr_base..self.attr_base + self.n_attrs)
            .contains(&token)
            .then(|| token - self.attr_base)
    }

    pub fn position_of_token(&self, token: TokenId) -> Option<GridPos> {
        let n = self.width * self.height;
        (self.pos_base..self.pos_base + n)
            .contains(&token)
            .then(|| {
                let i = token - self.pos_base;
                GridPos {
                    row: i / self.width,
                    col: i % self.width,
                }
            })
    }

    /// "is there a {category}" followed by EOS.
    pub fn is_there_query(&self, category: usize) -> TokenSeq {
        vec![
            IS_TOKEN,
            THERE_TOKEN,
            A_TOKEN,
            self.category_token(category),
            EOS_TOKEN,
        ]
    }

    pub fn describe_query(&self) -> TokenSeq {
        vec![DESCRIBE_TOKEN, EOS_TOKEN]
    }

    pub fn yes_response(&self) -> TokenSeq {
        vec![YES_TOKEN, EOS_TOKEN]
    }

    pub fn no_response(&self) -> TokenSeq {
        vec![NO_TOKEN, EOS_TOKEN]
    }

    /// Render a token sequence as readable words (debugging, reports).
    pub fn decode_words(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|t| self.word(*t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── Captions ─────────────────────────────────────────────────────────

/// Canonical caption: row-major `(attribute category at position)` clauses,
/// EOS-terminated.
pub fn caption(scene: &Scene, vocab: &Vocabulary) -> TokenSeq {
    let mut out = Vec::with_capacity(scene.occupancy() * 4 + 1);
    for (pos, placed) in scene.occupied() {
        out.push(vocab.attribute_token(placed.attribute));
        out.push(vocab.category_token(placed.category));
        out.push(AT_TOKEN);
        out.push(vocab.position_token(pos));
    }
    out.push(EOS_TOKEN);
    out
}

/// Strict inverse of [`caption`].
pub fn parse_caption(tokens: &[TokenId], vocab: &Vocabulary) -> Result<Scene> {
    if tokens.last() != Some(&EOS_TOKEN) {
        return Err(Error::Input("caption must end with EOS".into()));
    }
    let body = &tokens[..tokens.len() - 1];
    if body.is_empty() {
        return Err(Error::Input("caption describes no objects".into()));
    }
    if body.len() % 4 != 0 {
        return Err(Error::Input(format!(
            "caption body length {} is not a whole number of clauses",
            body.len()
        )));
    }
    let mut scene = Scene::new(vocab.width, vocab.height)?;
    for clause in body.chunks(4) {
        let attribute = vocab
            .attribute_of_token(clause[0])
            .ok_or_else(|| Error::Input(format!("token {} is not an attribute", clause[0])))?;
        let category = vocab
            .category_of_token(clause[1])
            .ok_or_else(|| Error::Input(format!("token {} is not a category", clause[1])))?;
        if clause[2] != AT_TOKEN {
            return Err(Error::Input(format!(
                "expected the 'at' token, got {}",
                clause[2]
            )));
        }
        let pos = vocab
            .position_of_token(clause[3])
            .ok_or_else(|| Error::Input(format!("token {} is not a position", clause[3])))?;
        if scene.get(pos).is_some() {
            return Err(Error::Input(format!(
                "duplicate position {pos:?} in caption"
            )));
        }
        scene.place(
            pos,
            Placed {
                category,
                attribute,
            },
        )?;
    }
    Ok(scene)
}

/// Cosine between the caption's re-rendered scene and an image.
pub fn similarity(
    caption_tokens: &[TokenId],
    image: &RenderedImage,
    vocab: &Vocabulary,
    rc: &RenderConfig,
) -> Result<f64> {
    let scene = parse_caption(caption_tokens, vocab)?;
    Ok(render(&scene, rc).cosine(image))
}

// ── Replacements and edits ───────────────────────────────────────────

/// One proposed slot substitution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub position: GridPos,
    pub old: usize,
    pub new: usize,
    pub tag: String,
}

pub fn validate_replacement(
    scene: &Scene,
    catalog: &Catalog,
    replacement: &Replacement,
) -> Result<()> {
    let placed = scene.get(replacement.position).ok_or_else(|| {
        Error::Input(format!(
            "replacement references empty slot {:?}",
            replacement.position
        ))
    })?;
    if placed.category != replacement.old {
        return Err(Error::Input(format!(
            "slot {:?} holds {}, not {}",
            replacement.position,
            catalog.category_name(placed.category),
            catalog.category_name(replacement.old)
        )));
    }
    if replacement.new == replacement.old {
        return Err(Error::Input("replacement must change the category".into()));
    }
    if !catalog.has_replacement(replacement.old, replacement.new) {
        return Err(Error::Input(format!(
            "{} -> {} is not in the catalog replacement table",
            catalog.category_name(replacement.old),
            catalog.category_name(replacement.new)
        )));
    }
    Ok(())
}

/// The toy inpainting analogue: the one slot changes category, everything
/// else (the original scene included) is untouched.
pub fn edit_scene(scene: &Scene, catalog: &Catalog, replacement: &Replacement) -> Result<Scene> {
    validate_replacement(scene, catalog, replacement)?;
    let mut edited = scene.clone();
    let placed = edited.get(replacement.position).expect("validated");
    edited.place(
        replacement.position,
        Placed {
            category: replacement.new,
            attribute: placed.attribute,
        },
    )?;
    Ok(edited)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rc() -> RenderConfig {
        RenderConfig { d_v: 16, seed: 99 }
    }

    #[test]
    fn default_catalog_is_valid_and_fits_default_vocab() {
        let catalog = Catalog::default_catalog();
        catalog.validate().unwrap();
        let vocab = Vocabulary::build(&catalog, DEFAULT_GRID.0, DEFAULT_GRID.1);
        assert!(vocab.len() <= 64, "vocab {} exceeds 64", vocab.len());
        // The worked example pair from the replacement table.
        let train = catalog.category_index("train").unwrap();
        let elephant = catalog.category_index("elephant").unwrap();
        assert!(catalog.has_replacement(train, elephant));
    }

    #[test]
    fn catalog_json_roundtrips() {
        let catalog = Catalog::default_catalog();
        let text = catalog.to_json().unwrap();
        let back = Catalog::from_json(&text).unwrap();
        assert_eq!(back, catalog);
    }

    #[test]
    fn catalog_validation_catches_bad_tables() {
        let mut catalog = Catalog::default_catalog();
        catalog.replacements.push(ReplacementRule {
            from: "train".into(),
            to: "train".into(),
            tag: "loop".into(),
        });
        assert!(catalog.validate().is_err());

        let mut catalog = Catalog::default_catalog();
        catalog.replacements.push(ReplacementRule {
            from: "train".into(),
            to: "griffin".into(),
            tag: "missing".into(),
        });
        assert!(catalog.validate().is_err());
    }

    #[test]
    fn gen_scene_is_deterministic() {
        let catalog = Catalog::default_catalog();
        let a = gen_scene(7, &catalog, 4, 4, 3).unwrap();
        let b = gen_scene(7, &catalog, 4, 4, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_scene(8, &catalog, 4, 4, 3).unwrap();
        assert_ne!(a.digest(&catalog), c.digest(&catalog));
    }

    #[test]
    fn gen_scene_bounds() {
        let catalog = Catalog::default_catalog();
        assert!(gen_scene(1, &catalog, 2, 2, 0).is_err());
        assert!(gen_scene(1, &catalog, 2, 2, 5).is_err());
        let full = gen_scene(1, &catalog, 2, 2, 4).unwrap();
        assert_eq!(full.occupancy(), 4);
    }

    #[test]
    fn scenes_place_only_conventional_objects() {
        let catalog = Catalog::default_catalog();
        for seed in 0..20 {
            let scene = gen_scene(seed, &catalog, 4, 4, 3).unwrap();
            for (_, placed) in scene.occupied() {
                assert_eq!(
                    catalog.categories[placed.category].class,
                    Expectedness::Conventional
                );
            }
        }
    }

    #[test]
    fn render_is_unit_norm_and_reproducible() {
        let catalog = Catalog::default_catalog();
        let scene = gen_scene(3, &catalog, 4, 4, 3).unwrap();
        let a = render(&scene, &rc());
        let b = render(&scene, &rc());
        assert_eq!(a, b);
        let norm: f64 = a.features().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_object_scene_renders_to_its_basis() {
        let mut scene = Scene::new(4, 4).unwrap();
        scene
            .place(
                GridPos { row: 1, col: 2 },
                Placed {
                    category: 0,
                    attribute: 1,
                },
            )
            .unwrap();
        let img = render(&scene, &rc());
        let basis = basis_vector(
            &rc(),
            Placed {
                category: 0,
                attribute: 1,
            },
            GridPos { row: 1, col: 2 },
        );
        for (a, b) in img.features().iter().zip(&basis) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn differing_scenes_have_cosine_below_one() {
        let catalog = Catalog::default_catalog();
        let scene = gen_scene(5, &catalog, 4, 4, 3).unwrap();
        let (pos, placed) = scene.occupied().next().unwrap();
        let (new, tag) = catalog.substitutes_of(placed.category)[0];
        let replacement = Replacement {
            position: pos,
            old: placed.category,
            new,
            tag: tag.into(),
        };
        let edited = edit_scene(&scene, &catalog, &replacement).unwrap();
        let a = render(&scene, &rc());
        let b = render(&edited, &rc());
        assert!(a.cosine(&b) < 1.0);
        assert_ne!(scene.digest(&catalog), edited.digest(&catalog));
    }

    #[test]
    fn edit_is_involutive_with_inverse_replacement() {
        let catalog = Catalog::default_catalog();
        let scene = gen_scene(6, &catalog, 4, 4, 2).unwrap();
        let (pos, placed) = scene.occupied().next().unwrap();
        let (new, tag) = catalog.substitutes_of(placed.category)[0];
        let fwd = Replacement {
            position: pos,
            old: placed.category,
            new,
            tag: tag.into(),
        };
        let edited = edit_scene(&scene, &catalog, &fwd).unwrap();
        // The inverse edit is outside the replacement table (conventional
        // targets), so apply it slot-wise.
        let mut back = edited.clone();
        back.place(pos, placed).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn edit_rejects_empty_slot_and_unknown_rule() {
        let catalog = Catalog::default_catalog();
        let mut scene = Scene::new(2, 2).unwrap();
        let train = catalog.category_index("train").unwrap();
        let elephant = catalog.category_index("elephant").unwrap();
        let whale = catalog.category_index("whale").unwrap();
        scene
            .place(
                GridPos { row: 0, col: 0 },
                Placed {
                    category: train,
                    attribute: 0,
                },
            )
            .unwrap();
        let empty_slot = Replacement {
            position: GridPos { row: 1, col: 1 },
            old: train,
            new: elephant,
            tag: "x".into(),
        };
        assert!(edit_scene(&scene, &catalog, &empty_slot).is_err());
        let not_in_table = Replacement {
            position: GridPos { row: 0, col: 0 },
            old: train,
            new: whale,
            tag: "x".into(),
        };
        assert!(edit_scene(&scene, &catalog, &not_in_table).is_err());
    }

    #[test]
    fn caption_roundtrips_through_parse() {
        let catalog = Catalog::default_catalog();
        let vocab = Vocabulary::build(&catalog, 4, 4);
        for seed in 0..30 {
            let scene = gen_scene(seed, &catalog, 4, 4, 1 + (seed as usize % 4)).unwrap();
            let tokens = caption(&scene, &vocab);
            let back = parse_caption(&tokens, &vocab).unwrap();
            assert_eq!(back, scene);
        }
    }

    #[test]
    fn single_object_caption_has_one_clause() {
        let catalog = Catalog::default_catalog();
        let vocab = Vocabulary::build(&catalog, 4, 4);
        let scene = gen_scene(11, &catalog, 4, 4, 1).unwrap();
        let tokens = caption(&scene, &vocab);
        assert_eq!(tokens.len(), 5);
        assert_eq!(*tokens.last().unwrap(), EOS_TOKEN);
    }

    #[test]
    fn captions_are_injective_on_small_world() {
        // Exhaustive: all 2-object scenes of a 2x2 grid with 1 category and
        // 2 attributes produce pairwise distinct captions.
        let catalog = Catalog {
            attributes: vec!["red".into(), "blue".into()],
            categories: vec![Category {
                name: "train".into(),
                class: Expectedness::Conventional,
            }],
            replacements: vec![],
        };
        catalog.validate().unwrap();
        let vocab = Vocabulary::build(&catalog, 2, 2);
        let cells = [
            GridPos { row: 0, col: 0 },
            GridPos { row: 0, col: 1 },
            GridPos { row: 1, col: 0 },
            GridPos { row: 1, col: 1 },
        ];
        let mut seen = std::collections::BTreeSet::new();
        let mut count = 0;
        for i in 0..cells.len() {
            for j in (i + 1)..cells.len() {
                for a1 in 0..2 {
                    for a2 in 0..2 {
                        let mut scene = Scene::new(2, 2).unwrap();
                        scene
                            .place(
                                cells[i],
                                Placed {
                                    category: 0,
                                    attribute: a1,
                                },
                            )
                            .unwrap();
                        scene
                            .place(
                                cells[j],
                                Placed {
                                    category: 0,
                                    attribute: a2,
                                },
                            )
                            .unwrap();
                        assert!(seen.insert(caption(&scene, &vocab)), "caption collision");
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(count, 24);
    }

    #[test]
    fn parse_rejects_malformed_captions() {
        let catalog = Catalog::default_catalog();
        let vocab = Vocabulary::build(&catalog, 4, 4);
        let scene = gen_scene(2, &catalog, 4, 4, 2).unwrap();
        let good = caption(&scene, &vocab);
        assert!(parse_caption(&good[..good.len() - 1], &vocab).is_err());
        assert!(parse_caption(&[EOS_TOKEN], &vocab).is_err());
        let mut swapped = good.clone();
        swapped.swap(0, 1);
        assert!(parse_caption(&swapped, &vocab).is_err());
    }

    #[test]
    fn similarity_oracle_properties() {
        let catalog = Catalog::default_catalog();
        let vocab = Vocabulary::build(&catalog, 4, 4);
        let scene = gen_scene(21, &catalog, 4, 4, 3).unwrap();
        let tokens = caption(&scene, &vocab);
        let image = render(&scene, &rc());
        // Self-similarity.
        let s = similarity(&tokens, &image, &vocab, &rc()).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        // Agreement with an independent dot-product routine.
        let re_render = render(&parse_caption(&tokens, &vocab).unwrap(), &rc());
        let dot: f64 = re_render
            .features()
            .iter()
            .zip(image.features())
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(s, dot);
        // A disjoint scene's caption scores below self-similarity.
        let other = gen_scene(22, &catalog, 4, 4, 3).unwrap();
        let s_other = similarity(&caption(&other, &vocab), &image, &vocab, &rc()).unwrap();
        assert!(s_other < 1.0);
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
        assert_eq!(mix_seed(&[5, 6, 7]), mix_seed(&[5, 6, 7]));
    }
}
