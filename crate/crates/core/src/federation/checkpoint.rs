//! Directory checkpoint: experts and optimizer moments in the binary
//! parameter format, φ and stored `q(z|s)` as CSV, client state per file
//! and a TOML manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClientState, ServerState, Snapshot};
use crate::error::{Error, Result};
use crate::moe::{ExpertBank, LocalGate};
use crate::numerics::{AdamState, Block, MlpSpec, ParamVector};
use crate::posterior::PosteriorTable;

const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    round: usize,
    experts: usize,
    widths: Vec<usize>,
    categories: usize,
    clients: usize,
    config_hash: String,
    adam_steps: Vec<u64>,
    adam_phi_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub config_hash: String,
}

fn prefixed(p: &ParamVector, prefix: &str) -> Vec<Block> {
    p.blocks()
        .iter()
        .map(|b| Block {
            name: format!("{prefix}{}", b.name),
            shape: b.shape.clone(),
            values: b.values.clone(),
        })
        .collect()
}

fn strip(p: &ParamVector, prefix: &str) -> Option<ParamVector> {
    let blocks: Vec<Block> = p
        .blocks()
        .iter()
        .filter_map(|b| {
            b.name.strip_prefix(prefix).map(|n| Block {
                name: n.to_string(),
                shape: b.shape.clone(),
                values: b.values.clone(),
            })
        })
        .collect();
    (!blocks.is_empty()).then(|| ParamVector::new(blocks))
}

fn write_params(path: &Path, p: &ParamVector) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    p.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_params(path: &Path) -> Result<ParamVector> {
    ParamVector::from_bytes(&fs::read(path)?)
}

fn adam_params(a: &AdamState) -> ParamVector {
    let mut blocks = prefixed(&a.m, "m.");
    blocks.extend(prefixed(&a.v, "v."));
    ParamVector::new(blocks)
}

fn adam_from(p: &ParamVector, t: u64) -> Result<AdamState> {
    let missing = || Error::Format {
        what: "optimizer moments",
        detail: "missing m or v blocks".into(),
    };
    let m = strip(p, "m.").ok_or_else(missing)?;
    let v = strip(p, "v.").ok_or_else(missing)?;
    m.check_aligned(&v)?;
    let mut a = AdamState::new(&m);
    a.m = m;
    a.v = v;
    a.t = t;
    Ok(a)
}

fn client_params(c: &ClientState) -> ParamVector {
    let mut blocks = Vec::new();
    if let Some(g) = &c.gate {
        blocks.extend(prefixed(&g.to_params(), "state."));
    }
    if let Some(b) = &c.local_bias {
        blocks.push(Block::new("local_bias", vec![b.len()], b.clone()).unwrap());
    }
    if let Some(l) = &c.local_layers {
        blocks.extend(prefixed(l, "local."));
    }
    if let Some(s) = &c.last_communicated {
        for (k, e) in s.bank.experts.iter().enumerate() {
            if let Some(e) = e {
                blocks.extend(prefixed(e, &format!("last.expert{k}.")));
            }
        }
        if let Some(g) = &s.gate {
            blocks.extend(prefixed(&g.to_params(), "last."));
        }
        // Marker so an empty snapshot still round-trips.
        blocks.push(Block::new("last.present", vec![s.bank.k()], s.bank.present().iter().map(|&p| f64::from(u8::from(p))).collect()).unwrap());
    }
    ParamVector::new(blocks)
}

fn client_from(p: &ParamVector, shard_id: usize, spec: &MlpSpec) -> Result<ClientState> {
    let gate = strip(p, "state.").map(|g| LocalGate::from_params(&g)).transpose()?;
    let local_bias = p.block("local_bias").map(|b| b.values.clone());
    let local_layers = strip(p, "local.");
    let last_communicated = match p.block("last.present") {
        None => None,
        Some(present) => {
            let mut experts = Vec::with_capacity(present.values.len());
            for (k, &flag) in present.values.iter().enumerate() {
                if flag == 1.0 {
                    let e = strip(p, &format!("last.expert{k}.")).ok_or_else(|| Error::Format {
                        what: "client state",
                        detail: format!("missing snapshot expert {k}"),
                    })?;
                    spec.check_params(&e)?;
                    experts.push(Some(e));
                } else {
                    experts.push(None);
                }
            }
            let gate = strip(p, "last.gate.")
                .map(|g| LocalGate::from_params(&prefixed_params(&g, "gate.")))
                .transpose()?;
            Some(Snapshot {
                bank: ExpertBank {
                    spec: spec.clone(),
                    experts,
                },
                gate,
            })
        }
    };
    Ok(ClientState {
        shard_id,
        gate,
        local_bias,
        local_layers,
        last_communicated,
    })
}

fn prefixed_params(p: &ParamVector, prefix: &str) -> ParamVector {
    ParamVector::new(prefixed(p, prefix))
}

pub fn save_checkpoint(dir: &Path, server: &ServerState, clients: &[ClientState], config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir.join("clients"))?;
    for (k, e) in server.bank.experts.iter().enumerate() {
        let e = e.as_ref().ok_or_else(|| Error::Contract("server bank must be full".into()))?;
        write_params(&dir.join(format!("expert_{k}.fmx")), e)?;
        write_params(&dir.join(format!("adam_{k}.fmx")), &adam_params(&server.adam_bank[k]))?;
    }
    write_params(&dir.join("adam_phi.fmx"), &adam_params(&server.adam_phi))?;

    let mut w = BufWriter::new(fs::File::create(dir.join("phi.csv"))?);
    writeln!(w, "category,expert,prob")?;
    for (c, row) in server.phi.rows().iter().enumerate() {
        for (k, p) in row.iter().enumerate() {
            writeln!(w, "{c},{k},{p}")?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join("stored_qzs.csv"))?);
    writeln!(w, "shard,expert,prob")?;
    for (s, q) in &server.stored_qzs {
        for (k, p) in q.iter().enumerate() {
            writeln!(w, "{s},{k},{p}")?;
        }
    }
    w.flush()?;

    for c in clients {
        write_params(&dir.join("clients").join(format!("client_{}.fmx", c.shard_id)), &client_params(c))?;
    }

    let manifest = Manifest {
        format: FORMAT,
        round: server.round,
        experts: server.bank.k(),
        widths: server.bank.spec.widths.clone(),
        categories: server.phi.categories(),
        clients: clients.len(),
        config_hash: config_hash.to_string(),
        adam_steps: server.adam_bank.iter().map(|a| a.t).collect(),
        adam_phi_steps: server.adam_phi.t,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        what: "checkpoint manifest",
        detail: e.to_string(),
    })?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn read_triples(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |e: String| Error::Format {
            what: "checkpoint csv",
            detail: format!("{}: {e}", path.display()),
        };
        out.push((
            rec[0].parse().map_err(|e| bad(format!("{e}")))?,
            rec[1].parse().map_err(|e| bad(format!("{e}")))?,
            rec[2].parse().map_err(|e| bad(format!("{e}")))?,
        ));
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        what: "checkpoint manifest",
        detail: e.to_string(),
    })?;
    if m.format != FORMAT {
        return Err(Error::Format {
            what: "checkpoint manifest",
            detail: format!("unsupported format {}", m.format),
        });
    }
    if m.adam_steps.len() != m.experts {
        return Err(Error::dim("checkpoint optimizer states", m.experts, m.adam_steps.len()));
    }
    let spec = MlpSpec::new(m.widths.clone())?;
    let mut experts = Vec::with_capacity(m.experts);
    let mut adam_bank = Vec::with_capacity(m.experts);
    for k in 0..m.experts {
        let e = read_params(&dir.join(format!("expert_{k}.fmx")))?;
        spec.check_params(&e)?;
        let a = adam_from(&read_params(&dir.join(format!("adam_{k}.fmx")))?, m.adam_steps[k])?;
        a.m.check_aligned(&e)?;
        experts.push(e);
        adam_bank.push(a);
    }
    let bank = ExpertBank::from_experts(spec.clone(), experts)?;

    let mut rows = vec![vec![f64::NAN; m.experts]; m.categories];
    for (c, k, p) in read_triples(&dir.join("phi.csv"))? {
        if c >= m.categories || k >= m.experts {
            return Err(Error::Format {
                what: "checkpoint phi",
                detail: format!("entry ({c},{k}) out of range"),
            });
        }
        rows[c][k] = p;
    }
    let phi = PosteriorTable::from_rows(rows)?;
    let adam_phi = adam_from(&read_params(&dir.join("adam_phi.fmx"))?, m.adam_phi_steps)?;
    adam_phi.m.check_aligned(&phi.to_params())?;

    let mut stored_qzs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (s, k, p) in read_triples(&dir.join("stored_qzs.csv"))? {
        if k >= m.experts {
            return Err(Error::Format {
                what: "checkpoint q(z|s)",
                detail: format!("expert {k} out of range"),
            });
        }
        stored_qzs.entry(s).or_insert_with(|| vec![0.0; m.experts])[k] = p;
    }

    let mut clients = Vec::with_capacity(m.clients);
    for s in 0..m.clients {
        let p = read_params(&dir.join("clients").join(format!("client_{s}.fmx")))?;
        clients.push(client_from(&p, s, &spec)?);
    }
    Ok(Checkpoint {
        server: ServerState {
            bank,
            phi,
            adam_bank,
            adam_phi,
            stored_qzs,
            round: m.round,
        },
        clients,
        config_hash: m.config_hash,
    })
}
