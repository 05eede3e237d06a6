//! Per-table ETL configuration and partition-key selection.

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::record::ChangeRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TableNature {
    /// Slowly changing reference data, cached by the stream processor.
    Master,
    /// Transactional data driving transformation.
    Operational,
}

/// ETL configuration of one source table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableConfig {
    pub table: String,
    pub nature: TableNature,
    pub row_key_column: String,
    /// Empty for master lookup tables that carry no business key.
    #[serde(default)]
    pub business_key_column: String,
    #[serde(default = "default_partitions")]
    pub partition_count: u32,
}

fn default_partitions() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    EmptyTableName,
    EmptyRowKey(String),
    MissingBusinessKey(String),
    ZeroPartitions(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::EmptyTableName => f.write_str("table name is empty"),
            ConfigError::EmptyRowKey(t) => write!(f, "{t}: row_key_column is empty"),
            ConfigError::MissingBusinessKey(t) => {
                write!(f, "{t}: operational tables need a business_key_column")
            }
            ConfigError::ZeroPartitions(t) => write!(f, "{t}: partition_count must be >= 1"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyError {
    /// The record belongs to another table.
    WrongTable { expected: String, found: String },
    MissingColumn(String),
    /// Null, float or boolean key values have no canonical rendering.
    UnsupportedType(String),
}

impl fmt::Display for KeyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyError::WrongTable { expected, found } => {
                write!(f, "record for table `{found}` routed to `{expected}`")
            }
            KeyError::MissingColumn(c) => write!(f, "key column `{c}` missing from row"),
            KeyError::UnsupportedType(c) => {
                write!(f, "key column `{c}` is not an integer or string")
            }
        }
    }
}

impl TableConfig {
    pub fn master(table: &str, row_key: &str, business_key: &str) -> Self {
        TableConfig {
            table: table.into(),
            nature: TableNature::Master,
            row_key_column: row_key.into(),
            business_key_column: business_key.into(),
            partition_count: 1,
        }
    }

    pub fn operational(table: &str, row_key: &str, business_key: &str, partitions: u32) -> Self {
        TableConfig {
            table: table.into(),
            nature: TableNature::Operational,
            row_key_column: row_key.into(),
            business_key_column: business_key.into(),
            partition_count: partitions,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.table.is_empty() {
            return Err(ConfigError::EmptyTableName);
        }
        if self.row_key_column.is_empty() {
            return Err(ConfigError::EmptyRowKey(self.table.clone()));
        }
        if self.nature == TableNature::Operational && self.business_key_column.is_empty() {
            return Err(ConfigError::MissingBusinessKey(self.table.clone()));
        }
        if self.partition_count == 0 {
            return Err(ConfigError::ZeroPartitions(self.table.clone()));
        }
        Ok(())
    }

    pub fn has_business_key(&self) -> bool {
        !self.business_key_column.is_empty()
    }

    /// Column whose value partitions this table's topic.
    pub fn partition_column(&self) -> &str {
        match self.nature {
            TableNature::Master => &self.row_key_column,
            TableNature::Operational => &self.business_key_column,
        }
    }

    /// Partition key for `record`: the row key for master tables, the business
    /// key for operational ones, canonically stringified.
    pub fn select_key(&self, record: &ChangeRecord) -> Result<String, KeyError> {
        if record.table != self.table {
            return Err(KeyError::WrongTable {
                expected: self.table.clone(),
                found: record.table.clone(),
            });
        }
        let column = self.partition_column();
        record
            .row
            .get(column)
            .ok_or_else(|| KeyError::MissingColumn(column.into()))?
            .canonical_key()
            .ok_or_else(|| KeyError::UnsupportedType(column.into()))
    }

    /// Business-key value of `row`, when the table has one and the row carries it.
    pub fn business_key_of(&self, row: &crate::value::Row) -> Option<String> {
        if !self.has_business_key() {
            return None;
        }
        row.get(&self.business_key_column)?.canonical_key()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Op;
    use crate::value::{row, Scalar};

    #[test]
    fn master_keys_by_row_id() {
        let cfg = TableConfig::master("equipment", "equip_id", "equip_id");
        let r = ChangeRecord::new(
            "equipment",
            Op::Insert,
            0,
            row([("equip_id", Scalar::from("E3")), ("status", "on".into())]),
        );
        assert_eq!(cfg.select_key(&r).unwrap(), "E3");
    }

    #[test]
    fn operational_keys_by_business_key() {
        let cfg = TableConfig::operational("production", "id", "equip_id", 20);
        let r = ChangeRecord::new(
            "production",
            Op::Insert,
            0,
            row([
                ("id", Scalar::Int(42)),
                ("equip_id", "E3".into()),
                ("qty", Scalar::Int(5)),
            ]),
        );
        assert_eq!(cfg.select_key(&r).unwrap(), "E3");
    }

    #[test]
    fn missing_business_key() {
        let cfg = TableConfig::operational("production", "id", "equip_id", 20);
        let r = ChangeRecord::new("production", Op::Insert, 0, row([("id", 42i64)]));
        assert_eq!(
            cfg.select_key(&r),
            Err(KeyError::MissingColumn("equip_id".into()))
        );
    }

    #[test]
    fn float_keys_rejected() {
        let cfg = TableConfig::master("t", "id", "");
        let r = ChangeRecord::new("t", Op::Insert, 0, row([("id", 1.5f64)]));
        assert!(matches!(cfg.select_key(&r), Err(KeyError::UnsupportedType(_))));
    }

    #[test]
    fn operational_without_business_key_is_invalid() {
        let cfg = TableConfig::operational("p", "id", "", 4);
        assert_eq!(cfg.validate(), Err(ConfigError::MissingBusinessKey("p".into())));
    }
}
