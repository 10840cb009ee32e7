//! Raw impression logs: one record per displayed item, grouped into
//! exposure pages by (user, page).

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImpressionRecord {
    pub user_id: u64,
    pub page_id: u64,
    /// Day-granularity timestamp; split thresholds compare against it.
    pub timestamp: u64,
    pub item_id: u64,
    pub category_id: u32,
    pub price_bucket: u32,
    /// 1-based position within the page.
    pub position: u32,
    pub clicked: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImpressionLog {
    pub records: Vec<ImpressionRecord>,
}

/// One exposure page: every record shown together, ordered by position.
#[derive(Clone, Debug)]
pub struct Page {
    pub page_id: u64,
    pub timestamp: u64,
    pub items: Vec<ImpressionRecord>,
}

impl ImpressionLog {
    /// Page-level invariants: a page has one timestamp and distinct
    /// positions, and every page has at least one record.
    pub fn validate(&self) -> Result<()> {
        let mut pages: BTreeMap<(u64, u64), (u64, Vec<u32>)> = BTreeMap::new();
        for r in &self.records {
            if r.clicked > 1 {
                return Err(Error::Invariant(format!(
                    "record (user {}, page {}): clicked must be 0 or 1",
                    r.user_id, r.page_id
                )));
            }
            if r.position == 0 {
                return Err(Error::Invariant(format!(
                    "record (user {}, page {}): positions are 1-based",
                    r.user_id, r.page_id
                )));
            }
            let entry = pages
                .entry((r.user_id, r.page_id))
                .or_insert((r.timestamp, Vec::new()));
            if entry.0 != r.timestamp {
                return Err(Error::Invariant(format!(
                    "page (user {}, page {}) has conflicting timestamps",
                    r.user_id, r.page_id
                )));
            }
            if entry.1.contains(&r.position) {
                return Err(Error::Invariant(format!(
                    "page (user {}, page {}) repeats position {}",
                    r.user_id, r.page_id, r.position
                )));
            }
            entry.1.push(r.position);
        }
        Ok(())
    }

    /// Pages per user, sorted by (timestamp, page_id); items within a page
    /// sorted by position.
    pub fn pages_by_user(&self) -> BTreeMap<u64, Vec<Page>> {
        let mut grouped: BTreeMap<(u64, u64), Page> = BTreeMap::new();
        for r in &self.records {
            grouped
                .entry((r.user_id, r.page_id))
                .or_insert_with(|| Page {
                    page_id: r.page_id,
                    timestamp: r.timestamp,
                    items: Vec::new(),
                })
                .items
                .push(r.clone());
        }
        let mut by_user: BTreeMap<u64, Vec<Page>> = BTreeMap::new();
        for ((user, _), mut page) in grouped {
            page.items.sort_by_key(|r| r.position);
            by_user.entry(user).or_default().push(page);
        }
        for pages in by_user.values_mut() {
            pages.sort_by_key(|p| (p.timestamp, p.page_id));
        }
        by_user
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "user_id\tpage_id\ttimestamp\titem_id\tcategory_id\tprice_bucket\tposition\tclicked"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.user_id,
                r.page_id,
                r.timestamp,
                r.item_id,
                r.category_id,
                r.price_bucket,
                r.position,
                r.clicked
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<ImpressionLog> {
        let f = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if ln == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 8 {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected 8 fields, got {}", parts.len()),
                });
            }
            let parse = |s: &str, what: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::Parse {
                    line: ln + 1,
                    msg: format!("bad {what}: {s}"),
                })
            };
            records.push(ImpressionRecord {
                user_id: parse(parts[0], "user_id")?,
                page_id: parse(parts[1], "page_id")?,
                timestamp: parse(parts[2], "timestamp")?,
                item_id: parse(parts[3], "item_id")?,
                category_id: parse(parts[4], "category_id")? as u32,
                price_bucket: parse(parts[5], "price_bucket")? as u32,
                position: parse(parts[6], "position")? as u32,
                clicked: parse(parts[7], "clicked")? as u8,
            });
        }
        Ok(ImpressionLog { records })
    }
}

/// Days since 1970-01-01 for a "YYYY-MM-DD" date (or a plain integer,
/// passed through).
fn parse_day(s: &str) -> Option<u64> {
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    let parts: Vec<&str> = s.split('-').collect();
    if parts.len() != 3 {
        return None;
    }
    let y: i64 = parts[0].parse().ok()?;
    let m: i64 = parts[1].parse().ok()?;
    let d: i64 = parts[2].parse().ok()?;
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return None;
    }
    // Howard Hinnant's days-from-civil.
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146097 + doe - 719468;
    u64::try_from(days).ok()
}

/// Search-log ingestion: maps CSV columns
/// (user_id, search_id, search_date, ad_id, position, is_click) into
/// impression records. Category and price are absent in this schema and
/// map to the reserved id 0.
pub fn read_search_csv(path: &Path) -> Result<ImpressionLog> {
    let f = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut columns: BTreeMap<String, usize> = BTreeMap::new();
    for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        let parts: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if ln == 0 {
            for (i, name) in parts.iter().enumerate() {
                columns.insert(name.to_lowercase(), i);
            }
            for required in ["user_id", "search_id", "search_date", "ad_id", "position", "is_click"] {
                if !columns.contains_key(required) {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("missing column {required}"),
                    });
                }
            }
            continue;
        }
        let get = |name: &str| -> Result<&str> {
            parts.get(columns[name]).copied().ok_or(Error::Parse {
                line: ln + 1,
                msg: format!("missing field {name}"),
            })
        };
        let num = |name: &str| -> Result<u64> {
            get(name)?.parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad {name}: {}", get(name).unwrap_or("?")),
            })
        };
        let date_raw = get("search_date")?;
        let timestamp = parse_day(date_raw).ok_or(Error::Parse {
            line: ln + 1,
            msg: format!("bad search_date: {date_raw}"),
        })?;
        records.push(ImpressionRecord {
            user_id: num("user_id")?,
            page_id: num("search_id")?,
            timestamp,
            item_id: num("ad_id")?,
            category_id: 0,
            price_bucket: 0,
            position: num("position")? as u32,
            clicked: num("is_click")? as u8,
        });
    }
    Ok(ImpressionLog { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(user: u64, page: u64, ts: u64, item: u64, pos: u32, clicked: u8) -> ImpressionRecord {
        ImpressionRecord {
            user_id: user,
            page_id: page,
            timestamp: ts,
            item_id: item,
            category_id: (item % 5) as u32,
            price_bucket: (item % 10) as u32 + 1,
            position: pos,
            clicked,
        }
    }

    #[test]
    fn validate_rejects_duplicate_positions() {
        let log = ImpressionLog {
            records: vec![record(1, 1, 0, 10, 1, 0), record(1, 1, 0, 11, 1, 1)],
        };
        assert!(log.validate().is_err());
    }

    #[test]
    fn validate_rejects_conflicting_page_timestamps() {
        let log = ImpressionLog {
            records: vec![record(1, 1, 0, 10, 1, 0), record(1, 1, 3, 11, 2, 1)],
        };
        assert!(log.validate().is_err());
    }

    #[test]
    fn pages_sorted_by_time_and_position() {
        let log = ImpressionLog {
            records: vec![
                record(1, 7, 5, 10, 2, 0),
                record(1, 7, 5, 11, 1, 1),
                record(1, 3, 2, 12, 1, 0),
            ],
        };
        let pages = log.pages_by_user();
        let user_pages = &pages[&1];
        assert_eq!(user_pages.len(), 2);
        assert_eq!(user_pages[0].page_id, 3);
        assert_eq!(user_pages[1].page_id, 7);
        assert_eq!(user_pages[1].items[0].item_id, 11);
        assert_eq!(user_pages[1].items[1].item_id, 10);
    }

    #[test]
    fn log_file_roundtrip() {
        let log = ImpressionLog {
            records: vec![record(1, 1, 0, 10, 1, 0), record(2, 2, 1, 11, 1, 1)],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.tsv");
        log.write_file(&path).unwrap();
        let back = ImpressionLog::read_file(&path).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "header\n1\t2\t3\n").unwrap();
        match ImpressionLog::read_file(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn search_csv_maps_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("search.csv");
        std::fs::write(
            &path,
            "user_id,search_id,search_date,ad_id,position,is_click\n\
             5,100,2015-04-28,42,1,0\n\
             5,100,2015-04-28,43,2,1\n",
        )
        .unwrap();
        let log = read_search_csv(&path).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.records[0].user_id, 5);
        assert_eq!(log.records[0].page_id, 100);
        assert_eq!(log.records[1].clicked, 1);
        assert_eq!(log.records[0].category_id, 0);
        // 2015-04-28 is 16553 days after the epoch.
        assert_eq!(log.records[0].timestamp, 16553);
        log.validate().unwrap();
    }
}
