//! PDB-subset structure I/O, FASTA sequences, and the amino-acid alphabet.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// The 20 canonical amino acids, indexed alphabetically by one-letter code
/// (A C D E F G H I K L M N P Q R S T V W Y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AminoAcid(u8);

const ONE_LETTER: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
const THREE_LETTER: [&str; 20] = [
    "ALA", "CYS", "ASP", "GLU", "PHE", "GLY", "HIS", "ILE", "LYS", "LEU", "MET", "ASN", "PRO",
    "GLN", "ARG", "SER", "THR", "VAL", "TRP", "TYR",
];

impl AminoAcid {
    pub const COUNT: usize = 20;

    pub fn from_index(i: usize) -> Option<Self> {
        (i < 20).then_some(Self(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_one_letter(c: char) -> Option<Self> {
        let c = c.to_ascii_uppercase() as u8;
        ONE_LETTER.iter().position(|&x| x == c).map(|i| Self(i as u8))
    }

    pub fn one_letter(self) -> char {
        ONE_LETTER[self.index()] as char
    }

    /// Three-letter lookup; MSE maps to MET, other non-canonical codes are
    /// unknown to the caller (skip with a warning).
    pub fn from_three_letter(code: &str) -> Option<Self> {
        let code = code.trim().to_ascii_uppercase();
        if code == "MSE" {
            return Self::from_three_letter("MET");
        }
        THREE_LETTER
            .iter()
            .position(|&x| x == code)
            .map(|i| Self(i as u8))
    }

    pub fn three_letter(self) -> &'static str {
        THREE_LETTER[self.index()]
    }

    pub fn all() -> impl Iterator<Item = AminoAcid> {
        (0..20).map(|i| AminoAcid(i as u8))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub name: String,
    pub element: String,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residue {
    /// Author sequence number (resSeq).
    pub index: i32,
    pub aa_type: AminoAcid,
    pub atoms: Vec<Atom>,
}

impl Residue {
    pub fn atom(&self, name: &str) -> Option<&Atom> {
        self.atoms.iter().find(|a| a.name == name)
    }

    pub fn ca(&self) -> Option<&Atom> {
        self.atom("CA")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub id: char,
    pub residues: Vec<Residue>,
}

/// Ordered chains of residues with named atoms in Cartesian angstroms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Structure {
    pub chains: Vec<Chain>,
}

impl Structure {
    pub fn chain(&self, id: char) -> Option<&Chain> {
        self.chains.iter().find(|c| c.id == id)
    }

    pub fn residue_count(&self) -> usize {
        self.chains.iter().map(|c| c.residues.len()).sum()
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Atom> {
        self.chains
            .iter()
            .flat_map(|c| c.residues.iter())
            .flat_map(|r| r.atoms.iter())
    }

    /// CA positions in chain order.
    pub fn ca_positions(&self) -> Vec<[f64; 3]> {
        self.chains
            .iter()
            .flat_map(|c| c.residues.iter())
            .filter_map(|r| r.ca().map(|a| a.position))
            .collect()
    }

    /// Sequence of a single chain, in residue order.
    pub fn chain_sequence(&self, id: char) -> Option<Sequence> {
        let chain = self.chain(id)?;
        Sequence::new(chain.residues.iter().map(|r| r.aa_type).collect()).ok()
    }

    fn validate(&self) -> Result<()> {
        for chain in &self.chains {
            if chain.residues.is_empty() {
                return Err(Error::Structure(format!("chain {} is empty", chain.id)));
            }
            for w in chain.residues.windows(2) {
                if w[1].index <= w[0].index {
                    return Err(Error::Structure(format!(
                        "residue indices not strictly increasing in chain {} ({} then {})",
                        chain.id, w[0].index, w[1].index
                    )));
                }
            }
            for r in &chain.residues {
                for a in &r.atoms {
                    if a.position.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Structure(format!(
                            "non-finite coordinate in chain {} residue {}",
                            chain.id, r.index
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Protein sequence over the canonical 20-letter alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    residues: Vec<AminoAcid>,
}

impl Sequence {
    pub fn new(residues: Vec<AminoAcid>) -> Result<Self> {
        if residues.is_empty() {
            return Err(Error::Degenerate("empty sequence".into()));
        }
        Ok(Self { residues })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn residues(&self) -> &[AminoAcid] {
        &self.residues
    }

    /// L x 20 one-hot encoding; exactly one 1 per row.
    pub fn one_hot(&self) -> Vec<[f64; 20]> {
        self.residues
            .iter()
            .map(|aa| {
                let mut row = [0.0; 20];
                row[aa.index()] = 1.0;
                row
            })
            .collect()
    }

    pub fn to_string_one_letter(&self) -> String {
        self.residues.iter().map(|a| a.one_letter()).collect()
    }
}

/// Parse ATOM records from PDB fixed-column text.
///
/// HETATM is ignored, altloc other than blank/'A' is dropped, insertion
/// codes are rejected, and unknown residue codes are skipped with a warning.
pub fn parse_structure(text: &str) -> Result<Structure> {
    let mut chains: Vec<Chain> = Vec::new();
    let mut saw_atom = false;
    for (lineno, line) in text.lines().enumerate() {
        if !line.starts_with("ATOM") {
            continue;
        }
        if line.len() < 54 {
            return Err(Error::PdbParse(format!(
                "line {}: ATOM record shorter than coordinate columns",
                lineno + 1
            )));
        }
        saw_atom = true;
        let altloc = line.as_bytes()[16] as char;
        if altloc != ' ' && altloc != 'A' {
            continue;
        }
        let icode = line.as_bytes()[26] as char;
        if icode != ' ' {
            return Err(Error::PdbParse(format!(
                "line {}: insertion codes are not supported",
                lineno + 1
            )));
        }
        let name = line[12..16].trim().to_string();
        let res_name = line[17..20].trim();
        let chain_id = line.as_bytes()[21] as char;
        let res_seq: i32 = line[22..26].trim().parse().map_err(|_| {
            Error::PdbParse(format!("line {}: bad residue number", lineno + 1))
        })?;
        let parse_coord = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::PdbParse(format!("line {}: bad {what}", lineno + 1)))
        };
        let x = parse_coord(&line[30..38], "x coordinate")?;
        let y = parse_coord(&line[38..46], "y coordinate")?;
        let z = parse_coord(&line[46..54], "z coordinate")?;
        let aa = match AminoAcid::from_three_letter(res_name) {
            Some(aa) => aa,
            None => {
                log::warn!(
                    "line {}: unknown residue code {res_name:?}, skipped",
                    lineno + 1
                );
                continue;
            }
        };
        let element = if line.len() >= 78 {
            let e = line[76..78].trim().to_string();
            if e.is_empty() {
                name.chars().take(1).collect()
            } else {
                e
            }
        } else {
            name.chars().take(1).collect()
        };

        if chains.last().map(|c| c.id) != Some(chain_id) {
            chains.push(Chain {
                id: chain_id,
                residues: Vec::new(),
            });
        }
        let chain = chains.last_mut().unwrap();
        let is_new = chain.residues.last().map(|r| r.index) != Some(res_seq);
        if is_new {
            chain.residues.push(Residue {
                index: res_seq,
                aa_type: aa,
                atoms: Vec::new(),
            });
        }
        chain.residues.last_mut().unwrap().atoms.push(Atom {
            name,
            element,
            position: [x, y, z],
        });
    }
    if !saw_atom {
        return Err(Error::PdbParse("no ATOM records".into()));
    }
    let structure = Structure { chains };
    structure.validate()?;
    Ok(structure)
}

/// Write fixed-column ATOM records, one TER per chain, END terminator.
pub fn write_structure(structure: &Structure) -> Result<String> {
    if structure.chains.is_empty() {
        return Err(Error::Degenerate("structure has no chains".into()));
    }
    structure.validate()?;
    let mut out = String::new();
    let mut serial = 1usize;
    for chain in &structure.chains {
        let mut last_res = None;
        for res in &chain.residues {
            for atom in &res.atoms {
                for &c in &atom.position {
                    if c.abs() >= 10000.0 {
                        return Err(Error::Structure(format!(
                            "coordinate {c} too large for PDB columns"
                        )));
                    }
                }
                // Atom-name column convention: names of <4 chars start in
                // column 14 for 1-2 char element symbols.
                let padded = if atom.name.len() >= 4 {
                    atom.name.clone()
                } else {
                    format!(" {:<3}", atom.name)
                };
                writeln!(
                    out,
                    "ATOM  {serial:>5} {padded:<4} {res_name:>3} {chain}{res_seq:>4}    {x:>8.3}{y:>8.3}{z:>8.3}{occ:>6.2}{b:>6.2}          {elem:>2}",
                    serial = serial.min(99999),
                    res_name = res.aa_type.three_letter(),
                    chain = chain.id,
                    res_seq = res.index,
                    x = atom.position[0],
                    y = atom.position[1],
                    z = atom.position[2],
                    occ = 1.0,
                    b = 0.0,
                    elem = atom.element,
                )
                .expect("write to string");
                serial += 1;
            }
            last_res = Some(res);
        }
        if let Some(res) = last_res {
            writeln!(
                out,
                "TER   {serial:>5}      {res_name:>3} {chain}{res_seq:>4}",
                serial = serial.min(99999),
                res_name = res.aa_type.three_letter(),
                chain = chain.id,
                res_seq = res.index,
            )
            .expect("write to string");
            serial += 1;
        }
    }
    out.push_str("END\n");
    Ok(out)
}

/// Parse the first record of a FASTA file.
pub fn parse_fasta(text: &str) -> Result<Sequence> {
    Ok(parse_fasta_all(text)?.remove(0).1)
}

/// Parse every record of a FASTA file as `(header, sequence)` pairs.
pub fn parse_fasta_all(text: &str) -> Result<Vec<(String, Sequence)>> {
    let mut records: Vec<(String, Vec<AminoAcid>)> = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            records.push((header.trim().to_string(), Vec::new()));
            continue;
        }
        let Some(current) = records.last_mut() else {
            return Err(Error::FastaParse("missing '>' header line".into()));
        };
        for c in line.chars() {
            if c.is_whitespace() {
                continue;
            }
            match AminoAcid::from_one_letter(c) {
                Some(aa) => current.1.push(aa),
                None => {
                    return Err(Error::FastaParse(format!(
                        "illegal sequence character {c:?}"
                    )))
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::FastaParse("empty input".into()));
    }
    records
        .into_iter()
        .map(|(name, residues)| {
            if residues.is_empty() {
                return Err(Error::FastaParse(format!(
                    "record {name:?} has an empty body"
                )));
            }
            Ok((name, Sequence::new(residues)?))
        })
        .collect()
}

pub fn write_fasta(name: &str, seq: &Sequence) -> String {
    let mut out = format!(">{name}\n");
    for chunk in seq.residues().chunks(60) {
        for aa in chunk {
            out.push(aa.one_letter());
        }
        out.push('\n');
    }
    out
}
