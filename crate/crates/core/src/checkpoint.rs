//! Single-file checkpoint: magic + version, a JSON header carrying the
//! architecture/switch/head configuration, then named parameter groups with
//! a full shape manifest. Loading refuses any name or shape mismatch.
//! Writes go through a temp file and an atomic rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::{AblationSwitches, ArchConfig, Network};

const MAGIC: &[u8; 8] = b"DSEGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    switches: AblationSwitches,
    head: HeadConfig,
    has_modulation: bool,
}

/// Raw tensors keyed by `(group, name)`.
pub type RawParams = BTreeMap<(String, String), ArrayD<f64>>;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
    buf.extend_from_slice(b);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf8".into()))
    }
}

/// Serialize a network to `path` atomically.
pub fn save(path: &Path, net: &Network) -> Result<()> {
    let header = Header {
        arch: net.arch,
        switches: net.switches,
        head: net.head_cfg,
        has_modulation: net.modulation.is_some(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    // group -> [(name, tensor)] in declaration order
    let mut groups: BTreeMap<String, Vec<(String, &ArrayD<f64>)>> = BTreeMap::new();
    for id in net.store.ids() {
        let p = net.store.param(id);
        groups
            .entry(p.group.clone())
            .or_default()
            .push((p.name.clone(), &p.value));
    }
    // the head is parameter-free but its group is part of the manifest
    groups.entry(crate::head::GROUP.to_string()).or_default();

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, header_json.len() as u32);
    buf.extend_from_slice(&header_json);
    put_u32(&mut buf, groups.len() as u32);
    for (gname, tensors) in &groups {
        put_str(&mut buf, gname);
        put_u32(&mut buf, tensors.len() as u32);
        for (name, value) in tensors {
            put_str(&mut buf, name);
            buf.push(value.ndim() as u8);
            for d in value.shape() {
                put_u32(&mut buf, *d as u32);
            }
            for v in value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse(data: &[u8]) -> Result<(Header, RawParams)> {
    let mut r = Reader { data, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let n_groups = r.u32()?;
    let mut raw = RawParams::new();
    for _ in 0..n_groups {
        let gname = r.string()?;
        let n_tensors = r.u32()?;
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndim = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let len: usize = dims.iter().product();
            let bytes = r.take(len * 8)?;
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals)
                .map_err(|e| Error::Checkpoint(format!("tensor {gname}/{name}: {e}")))?;
            raw.insert((gname.clone(), name), arr);
        }
    }
    Ok((header, raw))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    Ok(data)
}

/// Copy raw tensors into the network, requiring the exact same manifest
/// (names and shapes) for the network's parameters.
fn assign_all(net: &mut Network, raw: &RawParams) -> Result<()> {
    let mut expected = 0usize;
    for id in net.store.ids().collect::<Vec<_>>() {
        let (group, name, shape) = {
            let p = net.store.param(id);
            (p.group.clone(), p.name.clone(), p.value.shape().to_vec())
        };
        let Some(v) = raw.get(&(group.clone(), name.clone())) else {
            return Err(Error::Checkpoint(format!("missing tensor {group}/{name}")));
        };
        if v.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {group}/{name}: file {:?}, model {:?}",
                v.shape(),
                shape
            )));
        }
        *net.store.value_mut(id) = v.clone();
        expected += 1;
    }
    if expected != raw.len() {
        return Err(Error::Checkpoint(format!(
            "file has {} tensors, model expects {}",
            raw.len(),
            expected
        )));
    }
    Ok(())
}

/// Rebuild a network from a checkpoint file.
pub fn load(path: &Path) -> Result<Network> {
    let data = read_file(path)?;
    let (header, raw) = parse(&data)?;
    let mut net = Network::new(header.arch, header.switches, header.head, 0)?;
    if header.has_modulation {
        net.attach_modulation(0);
    }
    assign_all(&mut net, &raw)?;
    Ok(net)
}

/// Load only the named groups from a checkpoint into an existing network
/// (e.g. adopting a pretrained backbone). Shapes must match exactly.
pub fn adopt_groups(net: &mut Network, path: &Path, groups: &[&str]) -> Result<()> {
    let data = read_file(path)?;
    let (_, raw) = parse(&data)?;
    for id in net.store.ids().collect::<Vec<_>>() {
        let (group, name, shape) = {
            let p = net.store.param(id);
            (p.group.clone(), p.name.clone(), p.value.shape().to_vec())
        };
        if !groups.contains(&group.as_str()) {
            continue;
        }
        let Some(v) = raw.get(&(group.clone(), name.clone())) else {
            return Err(Error::Checkpoint(format!("missing tensor {group}/{name}")));
        };
        if v.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {group}/{name}"
            )));
        }
        *net.store.value_mut(id) = v.clone();
    }
    Ok(())
}

/// Header-only peek (arch, switches, fine-tuned or not).
pub fn describe(path: &Path) -> Result<(ArchConfig, AblationSwitches, bool)> {
    let data = read_file(path)?;
    let (header, _) = parse(&data)?;
    Ok((header.arch, header.switches, header.has_modulation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AblationSwitches, Network};

    fn small_net(seed: u64) -> Network {
        let arch = ArchConfig {
            image_size: 32,
            c_shared: 8,
            c_private: 12,
            c_f: 12,
            d_proj: 8,
            disc_hidden: 8,
            ca_reduction: 4,
            disc_class_head: false,
        };
        Network::new(arch, AblationSwitches::full(), HeadConfig::default(), seed).unwrap()
    }

    #[test]
    fn roundtrip_preserves_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = small_net(7);
        save(&path, &net).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(net.store.checksum_all(), loaded.store.checksum_all());
        assert_eq!(loaded.switches, net.switches);
        assert!(loaded.modulation.is_none());
    }

    #[test]
    fn modulation_group_marks_finetuned_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ft.ckpt");
        let mut net = small_net(3);
        net.attach_modulation(11);
        save(&path, &net).unwrap();
        let (_, _, has_mod) = describe(&path).unwrap();
        assert!(has_mod);
        let loaded = load(&path).unwrap();
        assert!(loaded.modulation.is_some());
        assert_eq!(net.store.checksum_all(), loaded.store.checksum_all());
    }

    #[test]
    fn shape_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = small_net(7);
        save(&path, &net).unwrap();
        // a network with different channel counts must refuse the file
        let arch2 = ArchConfig {
            c_f: 16,
            c_private: 16,
            ..net.arch
        };
        let mut other =
            Network::new(arch2, net.switches, HeadConfig::default(), 0).unwrap();
        let err = adopt_groups(&mut other, &path, &[crate::backbone::GROUP]);
        assert!(matches!(err, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = load(Path::new("/nonexistent/x.ckpt"));
        assert!(matches!(err, Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn adopt_backbone_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.ckpt");
        let pre = small_net(1);
        save(&path, &pre).unwrap();
        let mut target = small_net(2);
        let disc_before = target.store.checksum_group(crate::decomp::GROUP_DISCRIMINATOR);
        adopt_groups(&mut target, &path, &[crate::backbone::GROUP]).unwrap();
        assert_eq!(
            target.store.checksum_group(crate::backbone::GROUP),
            pre.store.checksum_group(crate::backbone::GROUP)
        );
        // everything else untouched
        assert_eq!(
            target.store.checksum_group(crate::decomp::GROUP_DISCRIMINATOR),
            disc_before
        );
    }
}
