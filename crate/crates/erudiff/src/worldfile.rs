//! World export/import as a line-oriented text file.
//!
//! Layout (one record per line, space separated):
//!
//! ```text
//! erudiff-world 1
//! seed <u64>
//! tokens <count>
//! token <id> <kind>                      # kind: implicit|explicit|foundational|null
//! entries <count>
//! entry <id> <category> <impl> <expl> <found...>
//! targets <count>
//! target <token_id> <n_components>
//! comp <weight> <mean_x> <mean_y> <c00> <c01> <c11>
//! distractors <count>
//! distractor <token_id> <n_components>
//! comp ...
//! end
//! ```
//!
//! All reals are decimal text with 9 significant digits; a save/load/save
//! round trip is byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{
    Category, ConditionToken, KnowledgeEntry, MixtureComponent, MixtureSpec, TokenId, TokenKind,
    WorldSpec,
};
use crate::error::{Error, Result};

const MAGIC: &str = "erudiff-world";
const VERSION: u32 = 1;

fn fmt_real(v: f64) -> String {
    format!("{:.8e}", v)
}

pub fn world_to_string(world: &WorldSpec) -> String {
    let mut s = String::new();
    writeln!(s, "{MAGIC} {VERSION}").unwrap();
    writeln!(s, "seed {}", world.seed).unwrap();
    writeln!(s, "tokens {}", world.tokens.len()).unwrap();
    for t in &world.tokens {
        writeln!(s, "token {} {}", t.id, t.kind.as_str()).unwrap();
    }
    writeln!(s, "entries {}", world.entries.len()).unwrap();
    for e in &world.entries {
        write!(
            s,
            "entry {} {} {} {}",
            e.entry_id,
            e.category.as_str(),
            e.implicit.id,
            e.explicit.id
        )
        .unwrap();
        for f in &e.found {
            write!(s, " {}", f.id).unwrap();
        }
        s.push('\n');
    }
    let write_mixtures = |s: &mut String, label: &str, map: &BTreeMap<TokenId, MixtureSpec>| {
        writeln!(s, "{label}s {}", map.len()).unwrap();
        for (id, m) in map {
            writeln!(s, "{label} {id} {}", m.components.len()).unwrap();
            for c in &m.components {
                writeln!(
                    s,
                    "comp {} {} {} {} {} {}",
                    fmt_real(c.weight),
                    fmt_real(c.mean[0]),
                    fmt_real(c.mean[1]),
                    fmt_real(c.cov[0]),
                    fmt_real(c.cov[1]),
                    fmt_real(c.cov[2]),
                )
                .unwrap();
            }
        }
    };
    write_mixtures(&mut s, "target", &world.target_of);
    write_mixtures(&mut s, "distractor", &world.distractor_of);
    s.push_str("end\n");
    s
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    lineno: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<Vec<&'a str>> {
        loop {
            let line = self
                .lines
                .next()
                .ok_or_else(|| Error::format("unexpected end of world file"))?;
            self.lineno += 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !fields.is_empty() {
                return Ok(fields);
            }
        }
    }

    fn expect(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let fields = self.next()?;
        if fields[0] != tag {
            return Err(Error::format(format!(
                "line {}: expected `{tag}`, got `{}`",
                self.lineno, fields[0]
            )));
        }
        Ok(fields)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(format!("cannot parse {what} `{s}`")))
}

pub fn parse_world(text: &str) -> Result<WorldSpec> {
    let mut r = LineReader {
        lines: text.lines(),
        lineno: 0,
    };

    let header = r.next()?;
    if header.len() != 2 || header[0] != MAGIC {
        return Err(Error::format("not an erudiff world file"));
    }
    let version: u32 = parse_num(header[1], "version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported world version {version}")));
    }

    let seed: u64 = parse_num(r.expect("seed")?[1], "seed")?;

    let n_tokens: usize = parse_num(r.expect("tokens")?[1], "token count")?;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let f = r.expect("token")?;
        if f.len() != 3 {
            return Err(Error::format("malformed token line"));
        }
        tokens.push(ConditionToken {
            id: parse_num(f[1], "token id")?,
            kind: TokenKind::parse(f[2])?,
        });
    }
    let lookup = |id: TokenId| -> Result<ConditionToken> {
        tokens
            .get(id as usize)
            .copied()
            .ok_or(Error::UnknownToken(id))
    };

    let n_entries: usize = parse_num(r.expect("entries")?[1], "entry count")?;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let f = r.expect("entry")?;
        if f.len() < 5 {
            return Err(Error::format("malformed entry line"));
        }
        entries.push(KnowledgeEntry {
            entry_id: parse_num(f[1], "entry id")?,
            category: Category::parse(f[2])?,
            implicit: lookup(parse_num(f[3], "token id")?)?,
            explicit: lookup(parse_num(f[4], "token id")?)?,
            found: f[5..]
                .iter()
                .map(|s| lookup(parse_num(s, "token id")?))
                .collect::<Result<Vec<_>>>()?,
        });
    }

    let mut read_mixtures = |label: &str| -> Result<BTreeMap<TokenId, MixtureSpec>> {
        let plural = format!("{label}s");
        let count: usize = parse_num(r.expect(&plural)?[1], "mixture count")?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let f = r.expect(label)?;
            let id: TokenId = parse_num(f[1], "token id")?;
            let n_comp: usize = parse_num(f[2], "component count")?;
            let mut components = Vec::with_capacity(n_comp);
            for _ in 0..n_comp {
                let c = r.expect("comp")?;
                if c.len() != 7 {
                    return Err(Error::format("malformed comp line"));
                }
                let v: Vec<f64> = c[1..]
                    .iter()
                    .map(|s| parse_num(s, "real"))
                    .collect::<Result<Vec<_>>>()?;
                components.push(MixtureComponent {
                    weight: v[0],
                    mean: [v[1], v[2]],
                    cov: [v[3], v[4], v[5]],
                });
            }
            map.insert(id, MixtureSpec { components });
        }
        Ok(map)
    };

    let target_of = read_mixtures("target")?;
    let distractor_of = read_mixtures("distractor")?;
    r.expect("end")?;

    let world = WorldSpec {
        entries,
        tokens,
        target_of,
        distractor_of,
        seed,
    };
    world.validate()?;
    Ok(world)
}

pub fn save_world(world: &WorldSpec, path: &Path) -> Result<()> {
    std::fs::write(path, world_to_string(world))?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<WorldSpec> {
    parse_world(&std::fs::read_to_string(path)?)
}
