//! Change records: the unit of the CDC log and the payload of broker messages.

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::value::{Row, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Op {
    Insert,
    Update,
    Delete,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::Insert => "INSERT",
            Op::Update => "UPDATE",
            Op::Delete => "DELETE",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One insert/update/delete event for one table row.
///
/// Field order is the on-disk field order. `row_key` is not encoded; it is
/// echoed from `row` by whoever knows the table's row-key column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub seq: u64,
    pub table: String,
    pub op: Op,
    pub tx_ts: i64,
    pub row: Row,
    #[serde(skip)]
    pub row_key: Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordError {
    EmptyTable,
    MissingRowKey { table: String, column: String },
    NullRowKey { table: String, column: String },
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordError::EmptyTable => f.write_str("record has an empty table name"),
            RecordError::MissingRowKey { table, column } => {
                write!(f, "{table}: row lacks row-key column `{column}`")
            }
            RecordError::NullRowKey { table, column } => {
                write!(f, "{table}: row-key column `{column}` is null")
            }
        }
    }
}

impl ChangeRecord {
    /// A record with `seq` 0; the log assigns the real sequence number.
    pub fn new(table: impl Into<String>, op: Op, tx_ts: i64, row: Row) -> Self {
        ChangeRecord {
            seq: 0,
            table: table.into(),
            op,
            tx_ts,
            row,
            row_key: Scalar::Null,
        }
    }

    /// Checks the row-key invariants against `row_key_column` and fills in
    /// `row_key`.
    pub fn validate(&mut self, row_key_column: &str) -> Result<(), RecordError> {
        if self.table.is_empty() {
            return Err(RecordError::EmptyTable);
        }
        let key = self
            .row
            .get(row_key_column)
            .ok_or_else(|| RecordError::MissingRowKey {
                table: self.table.clone(),
                column: row_key_column.into(),
            })?;
        if key.is_null() {
            return Err(RecordError::NullRowKey {
                table: self.table.clone(),
                column: row_key_column.into(),
            });
        }
        self.row_key = key.clone();
        Ok(())
    }

    pub fn is_delete(&self) -> bool {
        self.op == Op::Delete
    }
}
