#!/usr/bin/env python3
"""Download the public fairness datasets and convert them to headered CSV.

Each dataset is written to ``data/<name>.csv`` (or ``.csv.gz`` with
``--gzip``) in the layout expected by the shipped schema files under
``data/schemas``. Raw downloads are verified against pinned SHA-256
checksums before conversion.

    python3 scripts/fetch_datasets.py adult compas bank
    python3 scripts/fetch_datasets.py --raw-dir /path/to/raw --gzip adult

``--raw-dir`` skips the download and reads the raw files from a local
directory instead (file names as listed in SOURCES).
"""

import argparse
import csv
import gzip
import hashlib
import io
import os
import sys
import urllib.request
import zipfile

UCI = "https://archive.ics.uci.edu/ml/machine-learning-databases"

# name -> list of (url, raw file name, sha256 or None when not pinned yet)
SOURCES = {
    "adult": [
        (f"{UCI}/adult/adult.data", "adult.data",
         "5b00264637dbfec36bdeaab5676b0b309ff9eb788d63554ca0a249491c86603d"),
        (f"{UCI}/adult/adult.test", "adult.test",
         "a2a9044bc167a35b2361efbabec64e89d69ce82d9790d2980119aac5fd7e9c05"),
    ],
    "compas": [
        ("https://raw.githubusercontent.com/propublica/compas-analysis/master/"
         "compas-scores-two-years.csv", "compas-scores-two-years.csv",
         "c451db85908b2f7fef1d83203bedf6b71ecda0d5af468d82ae62178f91d0cc7d"),
    ],
    "german": [
        (f"{UCI}/statlog/german/german.data", "german.data",
         "b21f3d81db8071257d5ff1deaeba1fd4303b62712e6fcc9715c7a86202cb5871"),
    ],
    "heart": [
        (f"{UCI}/heart-disease/processed.cleveland.data",
         "processed.cleveland.data", None),
    ],
    "bank": [
        (f"{UCI}/00222/bank.zip", "bank.zip", None),
    ],
}

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num",
    "marital_status", "occupation", "relationship", "race", "sex",
    "capital_gain", "capital_loss", "hours_per_week", "native_country",
    "income",
]

COMPAS_COLUMNS = [
    "sex", "age", "age_cat", "race", "juv_fel_count", "juv_misd_count",
    "juv_other_count", "priors_count", "c_charge_degree", "two_year_recid",
]

GERMAN_COLUMNS = [
    "checking_status", "duration", "credit_history", "purpose",
    "credit_amount", "savings_status", "employment",
    "installment_commitment", "personal_status", "other_parties",
    "residence_since", "property_magnitude", "age", "other_payment_plans",
    "housing", "existing_credits", "job", "num_dependents", "own_telephone",
    "foreign_worker", "credit",
]

HEART_COLUMNS = [
    "age", "sex", "chest_pain", "rest_sbp", "cholesterol",
    "fasting_blood_sugar", "rest_ecg", "max_hr", "exercise_angina",
    "st_depression", "st_slope", "major_vessels", "thal", "diagnosis",
]

HEART_CODES = {
    "sex": {"1": "male", "0": "female"},
    "chest_pain": {"1": "typical ang", "2": "atypical ang",
                   "3": "non-anginal", "4": "asymptomatic"},
    "rest_ecg": {"0": "normal", "1": "ST-T abnormal",
                 "2": "left vent hypertrophy"},
    "st_slope": {"1": "upsloping", "2": "flat", "3": "downsloping"},
    "thal": {"3": "normal", "6": "fixed defect", "7": "reversable defect"},
}


def number(text):
    value = float(text)
    return str(int(value)) if value.is_integer() else repr(value)


def convert_adult(raw):
    rows = []
    for name in ("adult.data", "adult.test"):
        for line in raw[name].decode().splitlines():
            if not line.strip() or line.startswith("|"):
                continue
            fields = [f.strip() for f in line.split(",")]
            fields[-1] = fields[-1].rstrip(".")
            rows.append(fields)
    return ADULT_COLUMNS, rows


def convert_compas(raw):
    reader = csv.reader(io.StringIO(raw["compas-scores-two-years.csv"].decode()))
    header = next(reader)
    # the ProPublica file repeats some column names; keep the first occurrence
    index = {}
    for i, column in enumerate(header):
        index.setdefault(column, i)
    rows = [[record[index[c]] for c in COMPAS_COLUMNS] for record in reader]
    return COMPAS_COLUMNS, rows


def convert_german(raw):
    rows = [line.split() for line in raw["german.data"].decode().splitlines()
            if line.strip()]
    return GERMAN_COLUMNS, rows


def convert_heart(raw):
    rows = []
    for line in raw["processed.cleveland.data"].decode().splitlines():
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split(",")]
        record = {}
        for column, value in zip(HEART_COLUMNS, fields):
            if value == "?":
                record[column] = "?"
            elif column in HEART_CODES:
                record[column] = HEART_CODES[column][number(value)]
            elif column == "diagnosis":
                record[column] = "1" if float(value) > 0 else "0"
            else:
                record[column] = number(value)
        rows.append([record[c] for c in HEART_COLUMNS])
    return HEART_COLUMNS, rows


def convert_heart_tab(path):
    """Convert the Orange3 ``heart_disease.tab`` copy of the Cleveland data."""
    with open(path) as handle:
        lines = handle.read().splitlines()
    rows = []
    for line in lines[3:]:
        fields = line.split("\t")
        rows.append([f if f not in ("", "?") else "?" for f in fields])
    return HEART_COLUMNS, rows


def convert_bank(raw):
    with zipfile.ZipFile(io.BytesIO(raw["bank.zip"])) as archive:
        text = archive.read("bank-full.csv").decode()
    reader = csv.reader(io.StringIO(text), delimiter=";")
    header = next(reader)
    return header, list(reader)


CONVERTERS = {
    "adult": convert_adult,
    "compas": convert_compas,
    "german": convert_german,
    "heart": convert_heart,
    "bank": convert_bank,
}


def fetch_raw(name, raw_dir):
    raw = {}
    for url, filename, digest in SOURCES[name]:
        if raw_dir:
            with open(os.path.join(raw_dir, filename), "rb") as handle:
                payload = handle.read()
        else:
            print(f"downloading {url}", file=sys.stderr)
            with urllib.request.urlopen(url, timeout=60) as response:
                payload = response.read()
        actual = hashlib.sha256(payload).hexdigest()
        if digest is None:
            print(f"  {filename}: sha256 {actual} (not pinned)", file=sys.stderr)
        elif actual != digest:
            raise SystemExit(f"{filename}: checksum mismatch ({actual})")
        raw[filename] = payload
    return raw


def write_csv(path, header, rows, gzipped):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    data = buffer.getvalue().encode()
    if gzipped:
        path += ".gz"
        # fixed mtime keeps the archive byte-reproducible
        with open(path, "wb") as handle:
            with gzip.GzipFile(fileobj=handle, mode="wb", mtime=0,
                               filename="") as archive:
                archive.write(data)
    else:
        with open(path, "wb") as handle:
            handle.write(data)
    print(f"wrote {path} ({len(rows)} rows, sha256 of csv "
          f"{hashlib.sha256(data).hexdigest()})", file=sys.stderr)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("datasets", nargs="*", default=sorted(CONVERTERS))
    parser.add_argument("--raw-dir", help="read raw files from this directory")
    parser.add_argument("--heart-tab", help="convert an Orange3 heart_disease.tab instead")
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data"))
    parser.add_argument("--gzip", action="store_true")
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    for name in args.datasets:
        if name not in CONVERTERS:
            raise SystemExit(f"unknown dataset {name!r}; MEPS must be prepared "
                             "with the AIF360 MEPS scripts (see README)")
        if name == "heart" and args.heart_tab:
            header, rows = convert_heart_tab(args.heart_tab)
        else:
            header, rows = CONVERTERS[name](fetch_raw(name, args.raw_dir))
        write_csv(os.path.join(args.out, f"{name}.csv"), header, rows, args.gzip)


if __name__ == "__main__":
    main()
