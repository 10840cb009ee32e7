//! Self-describing binary checkpoints.
//!
//! Layout: magic and format version, a config echo block, the feature
//! schema, then per-parameter records in name order (name, shape, values,
//! AdaGrad accumulators), all little-endian. Round-trips are bit-exact.

use crate::embed::{FeatureField, FeatureSchema};
use crate::error::{Error, Result};
use crate::model::{DcinConfig, DcinParams};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DCINCKPT";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_block(w: &mut impl Write, text: &str) -> Result<()> {
    write_u32(w, text.len() as u32)?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_block(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 header block".into()))
}

fn schema_to_text(schema: &FeatureSchema) -> String {
    let mut out = String::new();
    for (group, fields) in [
        ("user", &schema.user),
        ("item", &schema.item),
        ("context", &schema.context),
        ("sequence", &schema.sequence),
    ] {
        for f in fields {
            out.push_str(&format!(
                "{group}\t{}\t{}\t{}\n",
                f.name, f.vocabulary_size, f.embedding_dim
            ));
        }
    }
    out
}

fn schema_from_text(text: &str) -> Result<FeatureSchema> {
    let mut schema = FeatureSchema {
        user: Vec::new(),
        item: Vec::new(),
        context: Vec::new(),
        sequence: Vec::new(),
    };
    for line in text.lines() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Checkpoint(format!("bad schema line: {line}")));
        }
        let field = FeatureField {
            name: parts[1].to_string(),
            vocabulary_size: parts[2]
                .parse()
                .map_err(|_| Error::Checkpoint("bad vocabulary size".into()))?,
            embedding_dim: parts[3]
                .parse()
                .map_err(|_| Error::Checkpoint("bad embedding dim".into()))?,
        };
        match parts[0] {
            "user" => schema.user.push(field),
            "item" => schema.item.push(field),
            "context" => schema.context.push(field),
            "sequence" => schema.sequence.push(field),
            other => return Err(Error::Checkpoint(format!("unknown schema group {other}"))),
        }
    }
    Ok(schema)
}

pub fn save(path: &Path, config: &DcinConfig, params: &DcinParams) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;

    let config_text: String = config
        .to_key_values()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    write_block(&mut w, &config_text)?;
    write_block(&mut w, &schema_to_text(&params.schema))?;

    write_u32(&mut w, params.set.len() as u32)?;
    for p in params.set.iter_name_order() {
        write_block(&mut w, &p.name)?;
        write_u32(&mut w, p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            write_u32(&mut w, d as u32)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in p.adagrad_accum.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(DcinConfig, DcinParams)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }

    let config_text = read_block(&mut r)?;
    let config = DcinConfig::from_key_values(
        config_text
            .lines()
            .filter_map(|l| l.split_once('=')),
    )?;
    let schema = schema_from_text(&read_block(&mut r)?)?;

    let mut params = DcinParams::new(&config, schema)?;
    let n = read_u32(&mut r)? as usize;
    if n != params.set.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {n} parameters, model expects {}",
            params.set.len()
        )));
    }
    for _ in 0..n {
        let name = read_block(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let id = params
            .set
            .id_by_name(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        if params.set.get(id).value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match model {:?}",
                shape,
                params.set.get(id).value.shape()
            )));
        }
        let count: usize = shape.iter().product();
        let mut read_tensor = |r: &mut BufReader<std::fs::File>| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let values = read_tensor(&mut r)?;
        let accums = read_tensor(&mut r)?;
        let p = params.set.get_mut(id);
        p.value.data_mut().copy_from_slice(&values);
        p.adagrad_accum.data_mut().copy_from_slice(&accums);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::FeatureField;
    use crate::model::Variant;
    use crate::tensor::Tensor;

    fn schema() -> FeatureSchema {
        let f = |name: &str, vocab: u32, dim: usize| FeatureField {
            name: name.to_string(),
            vocabulary_size: vocab,
            embedding_dim: dim,
        };
        FeatureSchema {
            user: vec![f("user_id", 6, 2)],
            item: vec![f("item_id", 8, 2), f("category", 4, 2)],
            context: vec![f("daypart", 5, 2)],
            sequence: vec![f("item_id", 8, 2), f("category", 4, 2)],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let config = crate::model::DcinConfig {
            variant: Variant::Full,
            ..crate::model::DcinConfig::tiny()
        };
        let mut params = DcinParams::new(&config, schema()).unwrap();
        // Put recognizable values in an accumulator to prove it travels.
        let id = params.set.id_by_name("explicit_ciu.w_q").unwrap();
        let shape = params.set.get(id).value.shape().to_vec();
        let n: usize = shape.iter().product();
        params.set.get_mut(id).adagrad_accum =
            Tensor::from_vec(&shape, (0..n).map(|i| i as f64 * 0.125).collect()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &config, &params).unwrap();
        let (config2, params2) = load(&path).unwrap();

        assert_eq!(config.to_key_values(), config2.to_key_values());
        assert_eq!(params.schema, params2.schema);
        for (a, b) in params.set.iter_name_order().zip(params2.set.iter_name_order()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "value drift in {}", a.name);
            assert_eq!(a.adagrad_accum, b.adagrad_accum, "accum drift in {}", a.name);
        }

        // Byte-for-byte stable re-save.
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &config2, &params2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn variant_architecture_travels_with_the_checkpoint() {
        let config = crate::model::DcinConfig {
            variant: Variant::Dnn,
            ..crate::model::DcinConfig::tiny()
        };
        let params = DcinParams::new(&config, schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dnn.ckpt");
        save(&path, &config, &params).unwrap();
        let (config2, params2) = load(&path).unwrap();
        assert_eq!(config2.variant, Variant::Dnn);
        assert_eq!(params2.set.len(), params.set.len());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT____").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
