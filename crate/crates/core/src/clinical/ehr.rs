use chrono::{Duration, NaiveDateTime};

use super::schema::ClinicalRecord;

/// Maximum allowed distance between an image and its matched EHR row.
pub fn match_window() -> Duration {
    Duration::hours(24)
}

/// Picks the record temporally closest to `image_time`, provided it lies
/// within 24 hours. Equal distances resolve to the earlier record.
pub fn match_ehr_to_image<'a>(
    image_time: NaiveDateTime,
    records: &'a [ClinicalRecord],
) -> Option<&'a ClinicalRecord> {
    records
        .iter()
        .filter(|r| (r.timestamp - image_time).abs() <= match_window())
        .min_by_key(|r| ((r.timestamp - image_time).abs(), r.timestamp))
}
