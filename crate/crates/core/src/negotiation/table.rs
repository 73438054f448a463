//! The authentication scenario matrix: 25 rows pairing client and server
//! auth modes with the hello extensions present in each shape. Cells marked
//! optional admit both settings. CPP/SPA are not part of the matrix — they
//! co-occur exactly when one of the modes involves credentials.

use serde::Serialize;

use super::{ClientAuthMode, ServerAuthMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExtensionKind {
    Sni,
    Cni,
    Cmi,
    Smi,
    Cpp,
    Spa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mark {
    Yes,
    No,
    Opt,
}

impl Mark {
    fn admits(self, present: bool) -> bool {
        match self {
            Mark::Yes => present,
            Mark::No => !present,
            Mark::Opt => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowGroup {
    Legacy,
    DidVcEnabled,
    Hybrid,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowSpec {
    /// 1-based row number in reading order.
    pub index: u8,
    pub group: RowGroup,
    pub label: &'static str,
    pub client: ClientAuthMode,
    pub server: ServerAuthMode,
    pub sni: Mark,
    pub cni: Mark,
    pub cmi: Mark,
    pub smi: Mark,
}

use ClientAuthMode as C;
use Mark::{No, Opt, Yes};
use RowGroup as G;
use ServerAuthMode as S;

macro_rules! row {
    ($idx:expr, $group:expr, $label:expr, $client:expr, $server:expr, $sni:expr, $cni:expr, $cmi:expr, $smi:expr) => {
        RowSpec {
            index: $idx,
            group: $group,
            label: $label,
            client: $client,
            server: $server,
            sni: $sni,
            cni: $cni,
            cmi: $cmi,
            smi: $smi,
        }
    };
}

static ROWS: [RowSpec; 25] = [
    // Legacy.
    row!(1, G::Legacy, "- / Cer_def", C::None, S::CertDefault, No, No, No, No),
    row!(2, G::Legacy, "- / Cer", C::None, S::Cert, Yes, No, No, No),
    row!(3, G::Legacy, "Cer / Cer_def", C::Cert, S::CertDefault, No, No, No, No),
    row!(4, G::Legacy, "Cer / Cer", C::Cert, S::Cert, Yes, No, No, No),
    // DID/VC-enabled.
    row!(5, G::DidVcEnabled, "- / DID_def", C::None, S::DidDefault, No, No, Opt, No),
    row!(6, G::DidVcEnabled, "- / DID", C::None, S::Did, Yes, No, No, No),
    row!(7, G::DidVcEnabled, "DID / DID_def (methods)", C::Did, S::DidDefault, No, No, Yes, Yes),
    row!(8, G::DidVcEnabled, "DID / DID_def (name)", C::Did, S::DidDefault, No, Yes, No, No),
    row!(9, G::DidVcEnabled, "DID / DID (methods)", C::Did, S::Did, Yes, No, Yes, Yes),
    row!(10, G::DidVcEnabled, "DID / DID (name)", C::Did, S::Did, Yes, Yes, No, No),
    row!(11, G::DidVcEnabled, "- / DID_def+VC", C::None, S::DidVcDefault, No, No, Yes, Yes),
    row!(12, G::DidVcEnabled, "- / DID+VC", C::None, S::DidVc, Yes, No, Yes, Yes),
    row!(13, G::DidVcEnabled, "DID+VC / DID_def+VC", C::DidVc, S::DidVcDefault, No, Opt, Yes, Yes),
    row!(14, G::DidVcEnabled, "DID+VC / DID+VC", C::DidVc, S::DidVc, Yes, Opt, Yes, Yes),
    row!(15, G::DidVcEnabled, "DID+VC / DID_def", C::DidVc, S::DidDefault, No, Opt, Opt, Opt),
    row!(16, G::DidVcEnabled, "DID+VC / DID", C::DidVc, S::Did, Yes, Opt, Opt, Opt),
    // Hybrid.
    row!(17, G::Hybrid, "DID / Cer_def (name)", C::Did, S::CertDefault, No, Yes, No, No),
    row!(18, G::Hybrid, "DID / Cer_def (methods)", C::Did, S::CertDefault, No, No, Yes, Yes),
    row!(19, G::Hybrid, "DID / Cer", C::Did, S::Cert, Yes, No, Opt, No),
    row!(20, G::Hybrid, "Cer / DID_def", C::Cert, S::DidDefault, No, No, Opt, No),
    row!(21, G::Hybrid, "Cer / DID", C::Cert, S::Did, Yes, No, No, No),
    row!(22, G::Hybrid, "DID+VC / Cer_def", C::DidVc, S::CertDefault, No, Opt, Yes, Yes),
    row!(23, G::Hybrid, "DID+VC / Cer", C::DidVc, S::Cert, Yes, Opt, Yes, Yes),
    row!(24, G::Hybrid, "Cer / DID_def+VC", C::Cert, S::DidVcDefault, No, No, Yes, Yes),
    row!(25, G::Hybrid, "Cer / DID+VC", C::Cert, S::DidVc, Yes, No, Yes, Yes),
];

pub fn all_rows() -> &'static [RowSpec; 25] {
    &ROWS
}

pub(super) fn find_row(
    client: ClientAuthMode,
    server: ServerAuthMode,
    sni: bool,
    cni: bool,
    cmi: bool,
    smi: bool,
) -> Option<&'static RowSpec> {
    let mut matches = ROWS.iter().filter(|r| {
        r.client == client
            && r.server == server
            && r.sni.admits(sni)
            && r.cni.admits(cni)
            && r.cmi.admits(cmi)
            && r.smi.admits(smi)
    });
    let first = matches.next()?;
    // The matrix is unambiguous: rows sharing an auth-mode pair have
    // disjoint fixed marks. Optional marks never overlap a sibling row.
    debug_assert!(matches.next().is_none(), "ambiguous scenario matrix");
    Some(first)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_five_rows_with_expected_group_sizes() {
        assert_eq!(ROWS.len(), 25);
        let count = |g: RowGroup| ROWS.iter().filter(|r| r.group == g).count();
        assert_eq!(count(RowGroup::Legacy), 4);
        assert_eq!(count(RowGroup::DidVcEnabled), 12);
        assert_eq!(count(RowGroup::Hybrid), 9);
    }

    #[test]
    fn indices_are_dense() {
        for (i, row) in ROWS.iter().enumerate() {
            assert_eq!(row.index as usize, i + 1);
        }
    }

    #[test]
    fn sni_mark_matches_default_identity() {
        // SNI is present exactly when the server identity is non-default.
        for row in ROWS.iter() {
            let expect = if row.server.is_default_identity() {
                Mark::No
            } else {
                Mark::Yes
            };
            assert_eq!(row.sni, expect, "row {}", row.index);
        }
    }

    #[test]
    fn sibling_rows_are_disjoint() {
        // For rows sharing (client, server), no concrete extension setting
        // may match more than one row.
        for a in ROWS.iter() {
            for b in ROWS.iter() {
                if a.index >= b.index || a.client != b.client || a.server != b.server {
                    continue;
                }
                for bits in 0..16u8 {
                    let (sni, cni, cmi, smi) = (
                        bits & 1 != 0,
                        bits & 2 != 0,
                        bits & 4 != 0,
                        bits & 8 != 0,
                    );
                    let both = a.sni.admits(sni)
                        && a.cni.admits(cni)
                        && a.cmi.admits(cmi)
                        && a.smi.admits(smi)
                        && b.sni.admits(sni)
                        && b.cni.admits(cni)
                        && b.cmi.admits(cmi)
                        && b.smi.admits(smi);
                    assert!(
                        !both,
                        "rows {} and {} both admit sni={sni} cni={cni} cmi={cmi} smi={smi}",
                        a.index, b.index
                    );
                }
            }
        }
    }
}
