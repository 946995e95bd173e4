//! JSON Lines records: one object per line with `id`, `features` and any of
//! `label`, `target`, `proba`, `pred`. Unknown keys are ignored.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureVector, LabeledSample, ModelOutput, Truth};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proba: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred: Option<f64>,
}

impl Record {
    pub fn from_sample(sample: &LabeledSample, output: Option<&ModelOutput>) -> Self {
        let (label, target) = match sample.truth {
            Truth::Label(l) => (Some(l as i64), None),
            Truth::Target(t) => (None, Some(t)),
        };
        Record {
            id: sample.id.clone(),
            features: sample.features.as_slice().to_vec(),
            label,
            target,
            proba: output.and_then(|o| o.proba().map(<[f64]>::to_vec)),
            pred: output.and_then(ModelOutput::pred),
        }
    }

    pub fn feature_vector(&self) -> Result<FeatureVector> {
        FeatureVector::new(self.features.clone())
    }

    pub fn truth(&self) -> Result<Option<Truth>> {
        match (self.label, self.target) {
            (Some(_), Some(_)) => Err(Error::input("record has both label and target")),
            (Some(l), None) if l < 0 => Err(Error::input(format!("negative label {l}"))),
            (Some(l), None) => Ok(Some(Truth::Label(l as usize))),
            (None, Some(t)) if !t.is_finite() => Err(Error::input("target must be finite")),
            (None, Some(t)) => Ok(Some(Truth::Target(t))),
            (None, None) => Ok(None),
        }
    }

    pub fn sample(&self) -> Result<LabeledSample> {
        let truth = self
            .truth()?
            .ok_or_else(|| Error::input("record has neither label nor target"))?;
        Ok(LabeledSample {
            id: self.id.clone(),
            features: self.feature_vector()?,
            truth,
        })
    }

    pub fn output(&self) -> Result<ModelOutput> {
        match (&self.proba, self.pred) {
            (Some(_), Some(_)) => Err(Error::input("record has both proba and pred")),
            (Some(p), None) => ModelOutput::classification(p.clone()),
            (None, Some(p)) => ModelOutput::regression(p),
            (None, None) => Err(Error::input("record has neither proba nor pred")),
        }
    }
}

/// Parses one JSON value per non-blank line. Errors carry 1-based line
/// numbers.
pub fn read_lines<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<(usize, Record)>> {
    read_lines(reader)
}

fn at_line<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Input(m) | Error::Config(m) => Error::Record { line, message: m },
        other => other,
    })
}

/// Labelled samples with their model outputs, e.g. a calibration file.
pub fn read_labeled_with_outputs<R: BufRead>(
    reader: R,
) -> Result<(Vec<LabeledSample>, Vec<ModelOutput>)> {
    let mut samples = Vec::new();
    let mut outputs = Vec::new();
    for (line, rec) in read_records(reader)? {
        samples.push(at_line(line, rec.sample())?);
        outputs.push(at_line(line, rec.output())?);
    }
    Ok((samples, outputs))
}

/// Labelled samples without model outputs.
pub fn read_labeled<R: BufRead>(reader: R) -> Result<Vec<LabeledSample>> {
    read_records(reader)?
        .into_iter()
        .map(|(line, rec)| at_line(line, rec.sample()))
        .collect()
}

/// Model outputs keyed by id. Duplicate ids are an error.
pub fn read_outputs_by_id<R: BufRead>(reader: R) -> Result<BTreeMap<String, ModelOutput>> {
    let mut out = BTreeMap::new();
    for (line, rec) in read_records(reader)? {
        let output = at_line(line, rec.output())?;
        if out.insert(rec.id.clone(), output).is_some() {
            return Err(Error::Record {
                line,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
    }
    Ok(out)
}

/// Unlabelled test inputs: id, features and model output. A label or
/// target, if present, is validated but otherwise ignored.
pub fn read_test_inputs<R: BufRead>(
    reader: R,
) -> Result<Vec<(String, FeatureVector, ModelOutput)>> {
    read_records(reader)?
        .into_iter()
        .map(|(line, rec)| {
            at_line(line, rec.truth())?;
            let features = at_line(line, rec.feature_vector())?;
            let output = at_line(line, rec.output())?;
            Ok((rec.id, features, output))
        })
        .collect()
}

pub fn write_lines<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<()> {
    for item in items {
        let line =
            serde_json::to_string(item).map_err(|e| Error::Internal(format!("encode: {e}")))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_classification_records_and_ignores_unknown_keys() {
        let text = r#"{"id":"a","features":[1,2],"label":1,"proba":[0.25,0.75],"extra":"x"}

{"id":"b","features":[0.5,0.1],"label":0,"proba":[0.9,0.1]}
"#;
        let (s, o) = read_labeled_with_outputs(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].truth, Truth::Label(1));
        assert_eq!(o[0].predicted_label(), Some(1));
    }

    #[test]
    fn schema_violations_report_line_numbers() {
        let text = "{\"id\":\"a\",\"features\":[1],\"label\":0,\"proba\":[1.0]}\n{\"id\":\"b\",\"features\":[1],\"label\":0,\"target\":2.0,\"proba\":[1.0]}\n";
        match read_labeled_with_outputs(text.as_bytes()) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match read_records("{\"id\": 3}".as_bytes()) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_test_inputs("{\"id\":\"a\",\"features\":[1]}".as_bytes()).is_err());
        assert!(read_labeled_with_outputs(
            "{\"id\":\"a\",\"features\":[1],\"label\":-1,\"proba\":[1.0]}".as_bytes()
        )
        .is_err());
    }

    #[test]
    fn outputs_join_by_id() {
        let text = "{\"id\":\"a\",\"features\":[1],\"pred\":2.0}\n{\"id\":\"b\",\"features\":[1],\"pred\":3.0}\n";
        let m = read_outputs_by_id(text.as_bytes()).unwrap();
        assert_eq!(m["b"].pred(), Some(3.0));
        let dup = "{\"id\":\"a\",\"features\":[1],\"pred\":2.0}\n{\"id\":\"a\",\"features\":[1],\"pred\":3.0}\n";
        assert!(matches!(
            read_outputs_by_id(dup.as_bytes()),
            Err(Error::Record { line: 2, .. })
        ));
        let labeled =
            read_labeled("{\"id\":\"a\",\"features\":[1],\"label\":2}".as_bytes()).unwrap();
        assert_eq!(labeled[0].truth, Truth::Label(2));
    }

    #[test]
    fn record_round_trip() {
        let s = LabeledSample::regression("r", FeatureVector::new(vec![1.0, 2.0]).unwrap(), 3.5)
            .unwrap();
        let out = ModelOutput::regression(3.0).unwrap();
        let rec = Record::from_sample(&s, Some(&out));
        let mut buf = Vec::new();
        write_lines(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "{\"id\":\"r\",\"features\":[1.0,2.0],\"target\":3.5,\"pred\":3.0}\n"
        );
        let back = read_records(text.as_bytes()).unwrap();
        assert_eq!(back[0].1, rec);
        assert_eq!(back[0].1.sample().unwrap(), s);
    }
}
