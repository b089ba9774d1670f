use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FMX1";

/// One named tensor inside a [`ParamVector`], stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Block {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim("block values", expected, values.len()));
        }
        Ok(Block {
            name: name.into(),
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Block {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }
}

/// An ordered collection of named parameter blocks.
///
/// Two vectors are *aligned* when their blocks agree in order, name and shape;
/// all element-wise arithmetic requires alignment and panics otherwise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    blocks: Vec<Block>,
}

impl ParamVector {
    pub fn new(blocks: Vec<Block>) -> Self {
        ParamVector { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block::zeros(b.name.clone(), b.shape.clone()))
                .collect(),
        }
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_aligned(&self, other: &ParamVector) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_aligned(&self, other: &ParamVector) -> Result<()> {
        if self.is_aligned(other) {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "[{}] vs [{}]",
                self.layout_string(),
                other.layout_string()
            )))
        }
    }

    fn layout_string(&self) -> String {
        self.blocks
            .iter()
            .map(|b| format!("{}{:?}", b.name, b.shape))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn zip_apply(&mut self, other: &ParamVector, mut f: impl FnMut(&mut f64, f64)) {
        assert!(self.is_aligned(other), "parameter layouts are not aligned");
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                f(x, *y);
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamVector) {
        self.zip_apply(other, |x, y| *x += y);
    }

    pub fn sub_assign(&mut self, other: &ParamVector) {
        self.zip_apply(other, |x, y| *x -= y);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        self.zip_apply(other, |x, y| *x += alpha * y);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values_mut().for_each(|x| *x *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// `self - other` as a new vector.
    pub fn minus(&self, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.sub_assign(other);
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.values_mut().for_each(|x| *x = v);
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert!(self.is_aligned(other), "parameter layouts are not aligned");
        let mut acc = 0.0;
        for (x, y) in self.values().zip(other.values()) {
            acc += x * y;
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        assert!(self.is_aligned(other), "parameter layouts are not aligned");
        self.values()
            .zip(other.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.blocks.iter().flat_map(|b| b.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.blocks.iter_mut().flat_map(|b| b.values.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Keeps only the blocks for which `keep` returns true.
    pub fn filter_blocks(&self, keep: impl Fn(&Block) -> bool) -> ParamVector {
        ParamVector {
            blocks: self.blocks.iter().filter(|b| keep(b)).cloned().collect(),
        }
    }

    /// Size in bytes of the FMX1 encoding.
    pub fn encoded_len(&self) -> usize {
        let mut n = MAGIC.len() + 4;
        for b in &self.blocks {
            n += 4 + b.name.len() + 4 + 4 * b.shape.len() + 8 * b.values.len();
        }
        n
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.blocks.len() as u32).to_le_bytes())?;
        for b in &self.blocks {
            w.write_all(&(b.name.len() as u32).to_le_bytes())?;
            w.write_all(b.name.as_bytes())?;
            w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
            for &d in &b.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &b.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                what: "parameter file",
                detail: format!("bad magic {magic:?}"),
            });
        }
        let count = read_u32(&mut r)? as usize;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format {
                what: "parameter file",
                detail: e.to_string(),
            })?;
            let ndims = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                read_exact(&mut r, &mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            blocks.push(Block {
                name,
                shape,
                values,
            });
        }
        Ok(ParamVector { blocks })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        what: "parameter file",
        detail: e.to_string(),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamVector {
        ParamVector::new(vec![
            Block::new("w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap(),
            Block::new("b", vec![2], vec![0.5, f64::MAX]).unwrap(),
        ])
    }

    #[test]
    fn block_rejects_wrong_count() {
        assert!(Block::new("w", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn header_layout_is_exact() {
        let pv = ParamVector::new(vec![Block::new("ab", vec![1], vec![2.0]).unwrap()]);
        let bytes = pv.to_bytes();
        let mut expected = b"FMX1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(pv.encoded_len(), bytes.len());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(ParamVector::from_bytes(&bytes).is_err());
        let bytes = sample().to_bytes();
        assert!(ParamVector::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn misaligned_layouts_are_detected() {
        let a = sample();
        let b = a.filter_blocks(|b| b.name == "w");
        assert!(!a.is_aligned(&b));
        assert!(a.check_aligned(&b).is_err());
    }

    fn pv_strategy() -> impl Strategy<Value = (ParamVector, ParamVector, ParamVector)> {
        (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
            let n = r * c + c;
            (
                proptest::collection::vec(-1e3f64..1e3, n),
                proptest::collection::vec(-1e3f64..1e3, n),
                proptest::collection::vec(-1e3f64..1e3, n),
            )
                .prop_map(move |(a, b, d)| {
                    let mk = |v: Vec<f64>| {
                        ParamVector::new(vec![
                            Block::new("w", vec![r, c], v[..r * c].to_vec()).unwrap(),
                            Block::new("b", vec![c], v[r * c..].to_vec()).unwrap(),
                        ])
                    };
                    (mk(a), mk(b), mk(d))
                })
        })
    }

    proptest! {
        #[test]
        fn encoding_round_trips((a, _, _) in pv_strategy()) {
            let back = ParamVector::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(back, a);
        }

        #[test]
        fn add_is_commutative_and_associative((a, b, c) in pv_strategy()) {
            let mut ab = a.clone();
            ab.add_assign(&b);
            let mut ba = b.clone();
            ba.add_assign(&a);
            prop_assert!(ab.max_abs_diff(&ba) <= 1e-12);

            let mut ab_c = ab.clone();
            ab_c.add_assign(&c);
            let mut bc = b.clone();
            bc.add_assign(&c);
            let mut a_bc = a.clone();
            a_bc.add_assign(&bc);
            let tol = 1e-12 * (1.0 + a.norm() + b.norm() + c.norm());
            prop_assert!(ab_c.max_abs_diff(&a_bc) <= tol);
        }

        #[test]
        fn scale_distributes((a, b, _) in pv_strategy(), s in -10.0f64..10.0) {
            let mut lhs = a.clone();
            lhs.add_assign(&b);
            lhs.scale(s);
            let mut rhs = a.scaled(s);
            rhs.add_assign(&b.scaled(s));
            let tol = 1e-12 * (1.0 + s.abs()) * (1.0 + a.norm() + b.norm());
            prop_assert!(lhs.max_abs_diff(&rhs) <= tol);
        }
    }
}
