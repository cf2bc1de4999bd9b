import sqlite3
from datetime import datetime
from pathlib import Path

import pandas as pd

DB_NAME = "fairgen_runs.db"

REPORT_FIELDS = ["tag", "baseline", "arch", "dataset", "measure", "lam", "eta", "seed", "n_samples",
                 "ind_cf", "grp_cf", "ddp", "bleu1", "bleu4", "rouge1", "rouge2", "rougeL", "rmse", "config_hash"]


def get_conn(db_path=None):
    path = Path(db_path) if db_path else Path(DB_NAME)
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(str(path))
    conn.row_factory = sqlite3.Row
    return conn


def init_db(db_path=None):
    conn = get_conn(db_path)
    c = conn.cursor()
    # satu baris per (run, quality measure); nilai per-seed disimpan mentah
    c.execute("""
        CREATE TABLE IF NOT EXISTS reports (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            tag TEXT,
            baseline TEXT,
            arch TEXT,
            dataset TEXT,
            measure TEXT,
            lam REAL,
            eta REAL,
            seed INTEGER,
            n_samples INTEGER,
            ind_cf REAL,
            grp_cf REAL,
            ddp REAL,
            bleu1 REAL,
            bleu4 REAL,
            rouge1 REAL,
            rouge2 REAL,
            rougeL REAL,
            rmse REAL,
            config_hash TEXT,
            created_at TEXT
        )
    """)
    conn.commit()
    conn.close()


def insert_reports(rows, db_path=None):
    """rows: iterable of dicts keyed by REPORT_FIELDS (missing keys -> NULL)."""
    init_db(db_path)
    conn = get_conn(db_path)
    c = conn.cursor()
    now = datetime.now().isoformat(timespec="seconds")
    placeholders = ", ".join("?" for _ in range(len(REPORT_FIELDS) + 1))
    n = 0
    for row in rows:
        values = [row.get(k) for k in REPORT_FIELDS] + [now]
        c.execute(f"INSERT INTO reports ({', '.join(REPORT_FIELDS)}, created_at) VALUES ({placeholders})", values)
        n += 1
    conn.commit()
    conn.close()
    return n


def load_reports(db_path=None) -> pd.DataFrame:
    init_db(db_path)
    conn = get_conn(db_path)
    df = pd.read_sql_query("SELECT * FROM reports ORDER BY id", conn)
    conn.close()
    if df.empty:
        return df
    df["created_at"] = pd.to_datetime(df["created_at"], errors="coerce")
    return df


def summarize_reports(df: pd.DataFrame) -> pd.DataFrame:
    """Mean and std over seeds per (tag, dataset, measure)."""
    if df.empty:
        return df
    metrics = ["ind_cf", "grp_cf", "ddp", "bleu1", "bleu4", "rouge1", "rouge2", "rougeL", "rmse"]
    grouped = df.groupby(["tag", "dataset", "measure"], dropna=False)
    out = grouped[metrics].agg(["mean", "std"])
    out.columns = [f"{m}_{stat}" for m, stat in out.columns]
    out["runs"] = grouped.size()
    return out.reset_index()


def clear_db(db_path=None):
    init_db(db_path)
    conn = get_conn(db_path)
    c = conn.cursor()
    c.execute("DELETE FROM reports")
    conn.commit()
    conn.close()
