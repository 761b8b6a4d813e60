//! Binary container for a multiscale basis.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header, then per cell the three nodal vectors followed by the local
//! matrices and moments, all little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdmsfem::mesh::Mesh;
use sdmsfem::msfem::{MsBasis, MsSpace};

use crate::error::CliError;

const MAGIC: &[u8; 8] = b"SDMSBAS\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    /// Digest of mesh, permeability and nsplit; a mismatch means the basis
    /// belongs to another problem.
    pub key: String,
    pub mesh_hash: String,
    pub eps: Option<f64>,
    pub amplitude: Option<f64>,
    /// Permeability description as JSON text.
    pub kfield: String,
    pub kind: String,
    pub nsplit: usize,
    pub cells: usize,
    pub fine_vertices_per_cell: usize,
    pub payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Compatibility key of a basis built on `mesh_hash` for `kfield` with `nsplit`.
pub fn archive_key(mesh_hash: &str, kfield: &str, nsplit: usize) -> String {
    let mut h = Sha256::new();
    h.update(mesh_hash.as_bytes());
    h.update([0]);
    h.update(kfield.as_bytes());
    h.update([0]);
    h.update((nsplit as u64).to_le_bytes());
    hex(&h.finalize())
}

fn put(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn payload(space: &MsSpace<f64>) -> Vec<u8> {
    let mut buf = Vec::new();
    for b in &space.bases {
        for eta in &b.eta {
            put(&mut buf, eta.iter().copied());
        }
        for m in [&b.local_a1, &b.local_a2, &b.local_grad] {
            put(&mut buf, m.iter().flatten().copied());
        }
        put(&mut buf, b.moment);
    }
    buf
}

pub struct ArchiveMeta<'a> {
    pub mesh_hash: &'a str,
    pub eps: Option<f64>,
    pub amplitude: Option<f64>,
    pub kfield: &'a str,
}

pub fn write_archive(path: &Path, space: &MsSpace<f64>, meta: &ArchiveMeta<'_>) -> Result<ArchiveHeader, CliError> {
    let body = payload(space);
    let header = ArchiveHeader {
        format_version: FORMAT_VERSION,
        key: archive_key(meta.mesh_hash, meta.kfield, space.nsplit),
        mesh_hash: meta.mesh_hash.to_string(),
        eps: meta.eps,
        amplitude: meta.amplitude,
        kfield: meta.kfield.to_string(),
        kind: "msfem".into(),
        nsplit: space.nsplit,
        cells: space.bases.len(),
        fine_vertices_per_cell: space.bases.first().map_or(0, |b| b.eta[0].len()),
        payload_sha256: hex(&Sha256::digest(&body)),
    };
    let head = serde_json::to_vec(&header).map_err(|e| CliError::Output(e.to_string()))?;
    let mut out = Vec::with_capacity(body.len() + head.len() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&body);
    let mut file = std::fs::File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    file.write_all(&out).map_err(|e| CliError::io(path.display().to_string(), e))?;
    Ok(header)
}

/// Reads an archive for `mesh`, refusing it unless its key equals
/// `expected_key` and its payload digest checks out.
pub fn read_archive(
    path: &Path,
    mesh: &Mesh<f64>,
    expected_key: &str,
) -> Result<(ArchiveHeader, MsSpace<f64>), CliError> {
    let fail = |reason: String| CliError::Archive { path: path.display().to_string(), reason };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path.display().to_string(), e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a basis archive".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let head_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let head_end =
        20usize.checked_add(head_len).filter(|&e| e <= bytes.len()).ok_or_else(|| fail("truncated header".into()))?;
    let header: ArchiveHeader =
        serde_json::from_slice(&bytes[20..head_end]).map_err(|e| fail(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(format!("header version {}", header.format_version)));
    }
    if header.key != expected_key {
        return Err(fail("stale archive: built for a different mesh, permeability or nsplit".into()));
    }
    let body = &bytes[head_end..];
    if hex(&Sha256::digest(body)) != header.payload_sha256 {
        return Err(fail("payload digest mismatch".into()));
    }
    if header.cells != mesh.num_triangles() {
        return Err(fail(format!("{} cells stored, mesh has {}", header.cells, mesh.num_triangles())));
    }
    let nf = header.fine_vertices_per_cell;
    let per_cell = 3 * nf + 27 + 3;
    if body.len() != 8 * per_cell * header.cells {
        return Err(fail("payload length does not match the header".into()));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut bases = Vec::with_capacity(header.cells);
    for (cell, chunk) in values.chunks_exact(per_cell).enumerate() {
        let eta = [0, 1, 2].map(|i| chunk[i * nf..(i + 1) * nf].to_vec());
        let mat = |off: usize| {
            let s = &chunk[3 * nf + off..3 * nf + off + 9];
            [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]
        };
        let m = &chunk[3 * nf + 27..];
        let basis = MsBasis::from_parts(mesh, cell, header.nsplit, eta, mat(0), mat(9), mat(18), [m[0], m[1], m[2]])?;
        bases.push(basis);
    }
    let space = MsSpace::from_bases(mesh, header.nsplit, bases)?;
    Ok((header, space))
}
