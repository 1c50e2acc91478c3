//! Synthetic grounded bilingual corpus: generation, persistence, vocabulary,
//! and batching.
//!
//! Each instance pairs a bag of image-region feature vectors with a source
//! and a target sentence rendered from the same template, plus gold word
//! alignments and gold token-to-region groundings. Visual words (object and
//! attribute mentions) are grounded; function words are not. Some templates
//! render an attribute only on the target side, so the target sentence is
//! not a pure function of the source text and translating it requires the
//! image.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Src,
    Tgt,
}

// ── Instances ───────────────────────────────────────────────────────────

/// One training triple: region features, source tokens, target tokens, and
/// optional gold annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub regions: Vec<Vec<f64>>,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    /// (src_index, tgt_index) pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_align: Option<Vec<(usize, usize)>>,
    /// (token_position, region_index) pairs, sorted by position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_grounding_src: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_grounding_tgt: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_mask_src: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_mask_tgt: Option<Vec<bool>>,
}

impl Instance {
    pub fn tokens(&self, side: Side) -> &[String] {
        match side {
            Side::Src => &self.src,
            Side::Tgt => &self.tgt,
        }
    }

    pub fn visual_mask(&self, side: Side) -> Option<&[bool]> {
        match side {
            Side::Src => self.visual_mask_src.as_deref(),
            Side::Tgt => self.visual_mask_tgt.as_deref(),
        }
    }

    pub fn grounding(&self, side: Side) -> Option<&[(usize, usize)]> {
        match side {
            Side::Src => self.gold_grounding_src.as_deref(),
            Side::Tgt => self.gold_grounding_tgt.as_deref(),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.regions.is_empty() {
            return Err("regions: must contain at least one region".into());
        }
        if self.src.is_empty() {
            return Err("src: empty sentence".into());
        }
        if self.tgt.is_empty() {
            return Err("tgt: empty sentence".into());
        }
        let d_v = self.regions[0].len();
        if self.regions.iter().any(|r| r.len() != d_v) {
            return Err("regions: inconsistent vector lengths".into());
        }
        let m = self.regions.len();
        if let Some(align) = &self.gold_align {
            for &(i, j) in align {
                if i >= self.src.len() || j >= self.tgt.len() {
                    return Err(format!("gold_align: link ({i},{j}) out of range"));
                }
            }
        }
        for (field, grounding, len) in [
            ("gold_grounding_src", &self.gold_grounding_src, self.src.len()),
            ("gold_grounding_tgt", &self.gold_grounding_tgt, self.tgt.len()),
        ] {
            if let Some(g) = grounding {
                for &(pos, region) in g {
                    if pos >= len {
                        return Err(format!("{field}: token position {pos} out of range"));
                    }
                    if region >= m {
                        return Err(format!("{field}: region index {region} out of range"));
                    }
                }
            }
        }
        for (field, mask, grounding, len) in [
            (
                "visual_mask_src",
                &self.visual_mask_src,
                &self.gold_grounding_src,
                self.src.len(),
            ),
            (
                "visual_mask_tgt",
                &self.visual_mask_tgt,
                &self.gold_grounding_tgt,
                self.tgt.len(),
            ),
        ] {
            if let Some(mask) = mask {
                if mask.len() != len {
                    return Err(format!("{field}: mask length {} != {len}", mask.len()));
                }
                let grounded: HashSet<usize> = grounding
                    .as_ref()
                    .map(|g| g.iter().map(|&(p, _)| p).collect())
                    .unwrap_or_default();
                for (pos, &visual) in mask.iter().enumerate() {
                    if visual != grounded.contains(&pos) {
                        return Err(format!(
                            "{field}: position {pos} visual flag disagrees with grounding"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

// ── World specification ─────────────────────────────────────────────────

/// One nameable thing in the world: an object or an attribute. Attributes
/// occupy their own image region when mentioned.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    /// Source-language rendering; may be a multi-word phrase.
    pub src_words: Vec<String>,
    /// Target-language rendering, always a single word.
    pub tgt_word: String,
    pub prototype: Vec<f64>,
}

/// Template item: a fixed function word, an object slot, or the attribute
/// attached to an object slot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Item {
    Word(String),
    Slot(usize),
    Attr(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Template {
    pub src: Vec<Item>,
    pub tgt: Vec<Item>,
    /// Item-level alignment links (src_item_index, tgt_item_index).
    pub links: Vec<(usize, usize)>,
}

impl Template {
    fn slot_count(&self) -> usize {
        self.src
            .iter()
            .chain(self.tgt.iter())
            .filter_map(|item| match item {
                Item::Slot(k) => Some(k + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    fn attr_slots(&self) -> Vec<usize> {
        let mut slots: Vec<usize> = self
            .src
            .iter()
            .chain(self.tgt.iter())
            .filter_map(|item| match item {
                Item::Attr(k) => Some(*k),
                _ => None,
            })
            .collect();
        slots.sort_unstable();
        slots.dedup();
        slots
    }

    /// Regions needed by one rendering of this template. Attributes share
    /// their noun's region, so only object slots count.
    pub fn regions_needed(&self) -> usize {
        self.slot_count()
    }
}

/// Everything the generator needs: inventory, lexicons, templates, noise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldSpec {
    pub objects: Vec<Concept>,
    pub attributes: Vec<Concept>,
    pub templates: Vec<Template>,
    /// Gaussian noise level applied to each region feature entry.
    pub sigma: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl WorldSpec {
    /// The standard desk-scale world: 13 objects (one rendered as a two-word
    /// source phrase), 4 attributes, and 6 templates, two of which mention
    /// the attribute only on the target side.
    pub fn preset(name: &str, seed: u64) -> Result<WorldSpec> {
        match name {
            "default" => Ok(WorldSpec::default_world(seed)),
            other => Err(Error::config(format!("unknown world preset {other:?}"))),
        }
    }

    pub fn default_world(seed: u64) -> WorldSpec {
        let pairs: &[(&str, &[&str], &str)] = &[
            ("dog", &["dog"], "chien"),
            ("cat", &["cat"], "chat"),
            ("ball", &["ball"], "ballon"),
            ("tree", &["tree"], "arbre"),
            ("car", &["car"], "voiture"),
            ("house", &["house"], "maison"),
            ("bird", &["bird"], "oiseau"),
            ("fish", &["fish"], "poisson"),
            ("book", &["book"], "livre"),
            ("chair", &["chair"], "chaise"),
            ("horse", &["horse"], "cheval"),
            ("boat", &["boat"], "bateau"),
            ("footballer", &["soccer", "player"], "footballeur"),
        ];
        let colors: &[(&str, &str, &str)] = &[
            ("red", "red", "rouge"),
            ("blue", "blue", "bleu"),
            ("green", "green", "vert"),
            ("black", "black", "noir"),
        ];
        // Objects occupy the leading feature dimensions; attribute offsets
        // live in the trailing ones. A region showing a colored object is the
        // object prototype plus the color offset, so attribute words are
        // grounded in the same region as the noun they modify.
        let feature_dim = 16;
        let attr_dims = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut object_concept = |name: &str, src: &[&str], tgt: &str| Concept {
            name: name.to_string(),
            src_words: src.iter().map(|s| s.to_string()).collect(),
            tgt_word: tgt.to_string(),
            prototype: (0..feature_dim)
                .map(|i| if i < feature_dim - attr_dims { gauss(&mut rng) } else { 0.0 })
                .collect(),
        };
        let objects = pairs
            .iter()
            .map(|(n, s, t)| object_concept(n, s, t))
            .collect::<Vec<_>>();
        let mut attr_concept = |name: &str, src: &str, tgt: &str| Concept {
            name: name.to_string(),
            src_words: vec![src.to_string()],
            tgt_word: tgt.to_string(),
            prototype: (0..feature_dim)
                .map(|i| if i < feature_dim - attr_dims { 0.0 } else { 2.0 * gauss(&mut rng) })
                .collect(),
        };
        let attributes = colors
            .iter()
            .map(|(n, s, t)| attr_concept(n, s, t))
            .collect::<Vec<_>>();

        use Item::{Attr, Slot};
        let w = |s: &str| Item::Word(s.to_string());
        // Attributes rendered on the target side only force the forward
        // model to read them from the image; the two source-only templates
        // do the same for the backward model.
        let templates = vec![
            // the A sees the B / le B vert voit le A rouge   (swap, both
            // attributes target-only)
            Template {
                src: vec![w("the"), Slot(0), w("sees"), w("the"), Slot(1)],
                tgt: vec![w("le"), Slot(1), Attr(1), w("voit"), w("le"), Slot(0), Attr(0)],
                links: vec![(0, 4), (1, 5), (2, 3), (3, 0), (4, 1)],
            },
            // a A is near the B / un A rouge est pres du B   (target-only)
            Template {
                src: vec![w("a"), Slot(0), w("is"), w("near"), w("the"), Slot(1)],
                tgt: vec![w("un"), Slot(0), Attr(0), w("est"), w("pres"), w("du"), Slot(1)],
                links: vec![(0, 0), (1, 1), (2, 3), (3, 4), (4, 5), (5, 6)],
            },
            // the red A sleeps / le A rouge dort   (attribute on both sides,
            // adjective order swapped)
            Template {
                src: vec![w("the"), Attr(0), Slot(0), w("sleeps")],
                tgt: vec![w("le"), Slot(0), Attr(0), w("dort")],
                links: vec![(0, 0), (1, 2), (2, 1), (3, 3)],
            },
            // the A finds a B / le A trouve un B rouge   (target-only)
            Template {
                src: vec![w("the"), Slot(0), w("finds"), w("a"), Slot(1)],
                tgt: vec![w("le"), Slot(0), w("trouve"), w("un"), Slot(1), Attr(1)],
                links: vec![(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)],
            },
            // the red A likes the B / le A rouge aime le B bleu   (one
            // attribute on both sides, the other target-only)
            Template {
                src: vec![w("the"), Attr(0), Slot(0), w("likes"), w("the"), Slot(1)],
                tgt: vec![w("le"), Slot(0), Attr(0), w("aime"), w("le"), Slot(1), Attr(1)],
                links: vec![(0, 0), (1, 2), (2, 1), (3, 3), (4, 4), (5, 5)],
            },
            // the A is here / le A rouge est ici   (target-only)
            Template {
                src: vec![w("the"), Slot(0), w("is"), w("here")],
                tgt: vec![w("le"), Slot(0), Attr(0), w("est"), w("ici")],
                links: vec![(0, 0), (1, 1), (2, 3), (3, 4)],
            },
            // the red A runs / le A court   (attribute source-only)
            Template {
                src: vec![w("the"), Attr(0), Slot(0), w("runs")],
                tgt: vec![w("le"), Slot(0), w("court")],
                links: vec![(0, 0), (2, 1), (3, 2)],
            },
            // a red A is far / un A est loin   (attribute source-only)
            Template {
                src: vec![w("a"), Attr(0), Slot(0), w("is"), w("far")],
                tgt: vec![w("un"), Slot(0), w("est"), w("loin")],
                links: vec![(0, 0), (2, 1), (3, 2), (4, 3)],
            },
        ];
        WorldSpec {
            objects,
            attributes,
            templates,
            sigma: 0.4,
            feature_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.templates.is_empty() {
            return Err(Error::config("world needs objects and templates"));
        }
        let mut src_seen = HashSet::new();
        let mut tgt_seen = HashSet::new();
        for c in self.objects.iter().chain(self.attributes.iter()) {
            if c.prototype.len() != self.feature_dim {
                return Err(Error::config(format!(
                    "concept {} prototype length {} != feature_dim {}",
                    c.name,
                    c.prototype.len(),
                    self.feature_dim
                )));
            }
            if !src_seen.insert(c.src_words.join(" ")) || !tgt_seen.insert(c.tgt_word.clone()) {
                return Err(Error::config(format!(
                    "concept-to-word map is not injective at {}",
                    c.name
                )));
            }
        }
        if !self.objects.iter().any(|c| c.src_words.len() > 1) {
            return Err(Error::config(
                "world needs at least one multi-word source phrase",
            ));
        }
        Ok(())
    }
}

// ── Generation ──────────────────────────────────────────────────────────

struct Rendering {
    tokens: Vec<String>,
    /// Token span of each template item.
    item_spans: Vec<(usize, usize)>,
    grounding: Vec<(usize, usize)>,
    mask: Vec<bool>,
}

fn render_side(
    items: &[Item],
    side: Side,
    world: &WorldSpec,
    slot_objects: &[usize],
    slot_attrs: &[(usize, usize)],
    region_of_slot: &[usize],
) -> Rendering {
    let mut tokens = Vec::new();
    let mut item_spans = Vec::new();
    let mut grounding = Vec::new();
    let mut mask = Vec::new();
    for item in items {
        let start = tokens.len();
        match item {
            Item::Word(word) => {
                tokens.push(word.clone());
                mask.push(false);
            }
            Item::Slot(k) => {
                let concept = &world.objects[slot_objects[*k]];
                let words: Vec<String> = match side {
                    Side::Src => concept.src_words.clone(),
                    Side::Tgt => vec![concept.tgt_word.clone()],
                };
                for word in words {
                    grounding.push((tokens.len(), region_of_slot[*k]));
                    mask.push(true);
                    tokens.push(word);
                }
            }
            Item::Attr(k) => {
                let &(_, attr_idx) = slot_attrs.iter().find(|(slot, _)| slot == k).unwrap();
                let concept = &world.attributes[attr_idx];
                let word = match side {
                    Side::Src => concept.src_words[0].clone(),
                    Side::Tgt => concept.tgt_word.clone(),
                };
                // grounded in the modified noun's region
                grounding.push((tokens.len(), region_of_slot[*k]));
                mask.push(true);
                tokens.push(word);
            }
        }
        item_spans.push((start, tokens.len()));
    }
    Rendering {
        tokens,
        item_spans,
        grounding,
        mask,
    }
}

/// Deterministically generate `count` instances with `m` regions each.
pub fn generate(world: &WorldSpec, count: usize, m: usize) -> Result<Vec<Instance>> {
    world.validate()?;
    if count == 0 {
        return Err(Error::contract("generate: count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    rng.set_stream(1);
    let mut instances = Vec::with_capacity(count);
    for idx in 0..count {
        let template = &world.templates[rng.gen_range(0..world.templates.len())];
        let needed = template.regions_needed();
        if needed > m {
            return Err(Error::Generation(format!(
                "template needs {needed} regions but only {m} are available"
            )));
        }

        let slot_count = template.slot_count();
        let slot_objects =
            rand::seq::index::sample(&mut rng, world.objects.len(), slot_count).into_vec();
        let attr_slots = template.attr_slots();
        let drawn =
            rand::seq::index::sample(&mut rng, world.attributes.len(), attr_slots.len()).into_vec();
        let slot_attrs: Vec<(usize, usize)> = attr_slots.iter().copied().zip(drawn).collect();

        // One region per object slot (an attributed object is its prototype
        // plus the attribute offset), then distractors from the unused
        // objects, then a random assignment to region indices.
        let mut used_vectors: Vec<Vec<f64>> = slot_objects
            .iter()
            .enumerate()
            .map(|(slot, &o)| {
                let mut v = world.objects[o].prototype.clone();
                if let Some(&(_, a)) = slot_attrs.iter().find(|&&(s, _)| s == slot) {
                    for (x, off) in v.iter_mut().zip(world.attributes[a].prototype.iter()) {
                        *x += off;
                    }
                }
                v
            })
            .collect();
        let used_object: HashSet<usize> = slot_objects.iter().copied().collect();
        let mut unused: Vec<&Vec<f64>> = world
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| !used_object.contains(i))
            .map(|(_, c)| &c.prototype)
            .collect();
        let distractor_count = m - used_vectors.len();
        if distractor_count > unused.len() {
            return Err(Error::Generation(format!(
                "{m} regions requested but only {} unused object prototypes remain",
                unused.len()
            )));
        }
        unused.shuffle(&mut rng);
        used_vectors.extend(unused.into_iter().take(distractor_count).cloned());

        let mut region_index: Vec<usize> = (0..m).collect();
        region_index.shuffle(&mut rng);
        let mut regions = vec![Vec::new(); m];
        for (vector, &at) in used_vectors.iter().zip(region_index.iter()) {
            regions[at] = vector
                .iter()
                .map(|&p| p + world.sigma * gauss(&mut rng))
                .collect();
        }
        let region_of_slot: Vec<usize> = region_index[..slot_count].to_vec();

        let src = render_side(
            &template.src,
            Side::Src,
            world,
            &slot_objects,
            &slot_attrs,
            &region_of_slot,
        );
        let tgt = render_side(
            &template.tgt,
            Side::Tgt,
            world,
            &slot_objects,
            &slot_attrs,
            &region_of_slot,
        );

        let mut gold_align = Vec::new();
        for &(si, ti) in &template.links {
            let (ss, se) = src.item_spans[si];
            let (ts, te) = tgt.item_spans[ti];
            for s in ss..se {
                for t in ts..te {
                    gold_align.push((s, t));
                }
            }
        }
        gold_align.sort_unstable();

        let instance = Instance {
            id: format!("i{idx:06}"),
            regions,
            src: src.tokens,
            tgt: tgt.tokens,
            gold_align: Some(gold_align),
            gold_grounding_src: Some(src.grounding),
            gold_grounding_tgt: Some(tgt.grounding),
            visual_mask_src: Some(src.mask),
            visual_mask_tgt: Some(tgt.mask),
        };
        debug_assert!(instance.validate().is_ok());
        instances.push(instance);
    }
    Ok(instances)
}

// ── Persistence ─────────────────────────────────────────────────────────

pub fn save(instances: &[Instance], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for instance in instances {
        let line = serde_json::to_string(instance)
            .map_err(|e| Error::contract(format!("serialize {}: {e}", instance.id)))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path)?;
    load_from(BufReader::new(file), &path.display().to_string())
}

pub fn load_from(reader: impl BufRead, path: &str) -> Result<Vec<Instance>> {
    let mut instances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let instance: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        instance.validate().map_err(|msg| Error::Parse {
            path: path.to_string(),
            line: lineno + 1,
            msg,
        })?;
        instances.push(instance);
    }
    Ok(instances)
}

// ── Vocabulary ──────────────────────────────────────────────────────────

/// Token/id bijection with fixed reserved ids 0..3 and a frequency-ranked
/// size cap (ties broken lexicographically).
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: std::collections::HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 4 || tokens[..4] != RESERVED.map(str::to_string) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "vocab file must start with the four reserved tokens".into(),
            });
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

pub fn build_vocab(instances: &[Instance], side: Side, cap: usize) -> Result<Vocab> {
    if instances.is_empty() {
        return Err(Error::contract("build_vocab: empty corpus"));
    }
    if cap <= 4 {
        return Err(Error::contract("build_vocab: cap must exceed 4"));
    }
    let mut counts: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for inst in instances {
        for tok in inst.tokens(side) {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(cap - 4).map(|(t, _)| t.to_string()));
    Ok(Vocab::from_tokens(tokens))
}

pub fn encode(tokens: &[String], vocab: &Vocab) -> Vec<usize> {
    tokens.iter().map(|t| vocab.id(t)).collect()
}

// ── Batching ────────────────────────────────────────────────────────────

/// A group of instances with PAD-aligned id matrices and true lengths.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions into the instance list this batch was built from.
    pub indices: Vec<usize>,
    pub src_ids: Vec<Vec<usize>>,
    pub tgt_ids: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

fn pad_block(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<usize>) {
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let width = lens.iter().copied().max().unwrap_or(0);
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (padded, lens)
}

pub fn batch(
    instances: &[Instance],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    size: usize,
) -> Result<Vec<Batch>> {
    if instances.is_empty() {
        return Err(Error::contract("batch: empty corpus"));
    }
    if size == 0 {
        return Err(Error::contract("batch: size must be at least 1"));
    }
    let mut batches = Vec::new();
    for chunk in (0..instances.len()).collect::<Vec<_>>().chunks(size) {
        let src_rows: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| encode(&instances[i].src, src_vocab))
            .collect();
        let tgt_rows: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| encode(&instances[i].tgt, tgt_vocab))
            .collect();
        let (src_ids, src_lens) = pad_block(src_rows);
        let (tgt_ids, tgt_lens) = pad_block(tgt_rows);
        batches.push(Batch {
            indices: chunk.to_vec(),
            src_ids,
            tgt_ids,
            src_lens,
            tgt_lens,
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldSpec {
        WorldSpec::default_world(7)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&world(), 50, 4).unwrap();
        let b = generate(&world(), 50, 4).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        for i in &a {
            buf_a.push(serde_json::to_string(i).unwrap());
        }
        let mut buf_b = Vec::new();
        for i in &b {
            buf_b.push(serde_json::to_string(i).unwrap());
        }
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn zero_noise_regions_equal_prototypes() {
        // at sigma = 0 every grounded region is exactly its concept
        // prototype, plus the exact attribute offset when the noun carries
        // one
        let mut w = world();
        w.sigma = 0.0;
        let instances = generate(&w, 50, 4).unwrap();
        let mut composed: Vec<Vec<f64>> = w.objects.iter().map(|c| c.prototype.clone()).collect();
        for obj in &w.objects {
            for attr in &w.attributes {
                composed.push(
                    obj.prototype
                        .iter()
                        .zip(attr.prototype.iter())
                        .map(|(a, b)| a + b)
                        .collect(),
                );
            }
        }
        let mut bare = 0usize;
        for inst in &instances {
            for &(_, region) in inst.gold_grounding_src.as_ref().unwrap() {
                assert!(
                    composed.iter().any(|p| p[..] == inst.regions[region][..]),
                    "grounded region is not an exact prototype composition"
                );
                if w.objects.iter().any(|c| c.prototype == inst.regions[region]) {
                    bare += 1;
                }
            }
        }
        assert!(bare > 0, "expected some unattributed regions to be exact prototypes");
    }

    #[test]
    fn visual_fraction_matches_template_implied_ratio() {
        let w = world();
        let instances = generate(&w, 1000, 4).unwrap();
        // template-implied expectation, with the average source length of an
        // object slot accounting for the multi-word phrase
        let slot_src_len: f64 = w
            .objects
            .iter()
            .map(|c| c.src_words.len() as f64)
            .sum::<f64>()
            / w.objects.len() as f64;
        let mut visual = 0.0;
        let mut total = 0.0;
        for t in &w.templates {
            for (items, side) in [(&t.src, Side::Src), (&t.tgt, Side::Tgt)] {
                for item in items {
                    match item {
                        Item::Word(_) => total += 1.0,
                        Item::Slot(_) => {
                            let len = if side == Side::Src { slot_src_len } else { 1.0 };
                            total += len;
                            visual += len;
                        }
                        Item::Attr(_) => {
                            total += 1.0;
                            visual += 1.0;
                        }
                    }
                }
            }
        }
        let implied = visual / total;
        let mut got_visual = 0usize;
        let mut got_total = 0usize;
        for inst in &instances {
            for mask in [&inst.visual_mask_src, &inst.visual_mask_tgt] {
                let mask = mask.as_ref().unwrap();
                got_visual += mask.iter().filter(|&&v| v).count();
                got_total += mask.len();
            }
        }
        let got = got_visual as f64 / got_total as f64;
        assert!(
            (got - implied).abs() <= 0.05,
            "visual fraction {got:.3} vs implied {implied:.3}"
        );
    }

    #[test]
    fn gold_alignment_preserves_grounding() {
        // every gold link out of a visual source token lands on a target
        // token grounded in the same region; attributes rendered on one side
        // only carry no link at all
        let instances = generate(&world(), 200, 4).unwrap();
        let mut checked = 0usize;
        for inst in &instances {
            let src_ground: std::collections::HashMap<usize, usize> = inst
                .gold_grounding_src
                .clone()
                .unwrap()
                .into_iter()
                .collect();
            let tgt_ground: std::collections::HashMap<usize, usize> = inst
                .gold_grounding_tgt
                .clone()
                .unwrap()
                .into_iter()
                .collect();
            let mask = inst.visual_mask_src.as_ref().unwrap();
            for &(s, t) in inst.gold_align.as_ref().unwrap() {
                if mask[s] {
                    assert_eq!(src_ground[&s], tgt_ground[&t]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100, "expected many visual links, saw {checked}");
    }

    #[test]
    fn generation_error_when_regions_too_few() {
        let err = generate(&world(), 500, 2).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let instances = generate(&world(), 10, 4).unwrap();
        save(&instances, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(instances, loaded);
    }

    #[test]
    fn load_reports_line_and_field() {
        let text = r#"{"id":"a","regions":[[1.0]],"src":["x"],"tgt":["y"]}
{"id":"b","src":["x"],"tgt":["y"]}"#;
        let err = load_from(text.as_bytes(), "mem").unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("regions"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn gold_fields_are_optional() {
        let text = r#"{"id":"a","regions":[[1.0,2.0]],"src":["x"],"tgt":["y"]}"#;
        let loaded = load_from(text.as_bytes(), "mem").unwrap();
        assert_eq!(loaded.len(), 1);
        assert!(loaded[0].gold_align.is_none());
        assert!(loaded[0].visual_mask_src.is_none());
    }

    #[test]
    fn vocab_single_token_and_unk() {
        let inst = Instance {
            id: "a".into(),
            regions: vec![vec![0.0]],
            src: vec!["a".into()],
            tgt: vec!["b".into()],
            gold_align: None,
            gold_grounding_src: None,
            gold_grounding_tgt: None,
            visual_mask_src: None,
            visual_mask_tgt: None,
        };
        let vocab = build_vocab(&[inst], Side::Src, 100).unwrap();
        assert_eq!(vocab.size(), 5);
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("missing"), UNK);
        assert_eq!(vocab.token(PAD), "<pad>");
    }

    #[test]
    fn vocab_cap_is_frequency_ranked_with_lex_ties() {
        let mk = |src: Vec<&str>| Instance {
            id: "x".into(),
            regions: vec![vec![0.0]],
            src: src.into_iter().map(str::to_string).collect(),
            tgt: vec!["t".into()],
            gold_align: None,
            gold_grounding_src: None,
            gold_grounding_tgt: None,
            visual_mask_src: None,
            visual_mask_tgt: None,
        };
        let corpus = vec![mk(vec!["b", "b", "c", "a", "z", "z"])];
        let vocab = build_vocab(&corpus, Side::Src, 6).unwrap();
        // b and z tie at 2 -> lexicographic keeps b then z
        assert_eq!(vocab.id("b"), 4);
        assert_eq!(vocab.id("z"), 5);
        assert_eq!(vocab.id("a"), UNK);
    }

    #[test]
    fn batch_pads_and_records_lengths() {
        let mk = |id: &str, n: usize| Instance {
            id: id.into(),
            regions: vec![vec![0.0]],
            src: (0..n).map(|i| format!("s{i}")).collect(),
            tgt: (0..n).map(|i| format!("t{i}")).collect(),
            gold_align: None,
            gold_grounding_src: None,
            gold_grounding_tgt: None,
            visual_mask_src: None,
            visual_mask_tgt: None,
        };
        let corpus = vec![mk("a", 3), mk("b", 5)];
        let sv = build_vocab(&corpus, Side::Src, 100).unwrap();
        let tv = build_vocab(&corpus, Side::Tgt, 100).unwrap();
        let batches = batch(&corpus, &sv, &tv, 2).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.src_ids[0].len(), 5);
        assert_eq!(b.src_ids[1].len(), 5);
        assert_eq!(b.src_lens, vec![3, 5]);
        assert_eq!(&b.src_ids[0][3..], &[PAD, PAD]);
    }
}
