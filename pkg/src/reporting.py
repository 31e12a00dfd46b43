import json
import logging
import os
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from src.models.scenario import ScenarioBundle
from src.polarization import EstimatedSOP
from src.qkd_protocol import SessionRecord
from src.session import SessionOutcome, TraceRow

logger = logging.getLogger(__name__)

TRACE_FILE = 'trace.csv'
QBER_FILE = 'qber.csv'
SUMMARY_FILE = 'summary.json'

TRACE_COLUMNS = ['time_s', 'phase', 's1_hat', 's2_hat', 'v_x1', 'v_x2']
QBER_COLUMNS = ['interval_index', 'sifted_bits', 'errors', 'qber',
                'start_s', 'control_seconds', 'qkd_seconds', 'detected', 'double_clicks',
                'qr_sifted', 'qr_errors', 'control_samples', 'converged', 'flagged']

# Six significant digits for every float column
FLOAT_FORMAT = '%.6g'


def trace_frame(trace: Sequence[TraceRow]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [(row.time_s, row.phase, row.s1_hat, row.s2_hat, row.v_x1, row.v_x2) for row in trace],
        columns=TRACE_COLUMNS,
    )
    return frame.astype({'time_s': 'int64', 's1_hat': 'float64', 's2_hat': 'float64',
                         'v_x1': 'float64', 'v_x2': 'float64'})


def qber_frame(records: Sequence[SessionRecord]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [(r.interval_index, r.sifted_bits, r.errors, r.qber, r.start_s, r.control_seconds,
          r.qkd_seconds, r.detected, r.double_clicks, r.qr_sifted, r.qr_errors,
          r.control_samples, int(r.converged), int(r.flagged)) for r in records],
        columns=QBER_COLUMNS,
    )
    return frame.astype({'qber': 'float64'})


def _write_csv(frame: pd.DataFrame, path: str):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep='', lineterminator='\n')


def _stats(values: Sequence[float]) -> Optional[Dict]:
    if len(values) == 0:
        return None
    array = np.asarray(values, dtype=float)
    return {
        'mean': float(array.mean()),
        'std': float(array.std(ddof=1)) if len(array) > 1 else 0.0,
        'count': int(len(array)),
    }


def _sop_stats(samples: Sequence[EstimatedSOP]) -> Dict:
    return {
        's1': _stats([sample.s1_hat for sample in samples]),
        's2': _stats([sample.s2_hat for sample in samples]),
    }


def summarize(outcome: SessionOutcome, bundle: ScenarioBundle, seed: int, duration_s: float,
              failure_budget: Optional[int] = None) -> Dict:
    """Run-level statistics for summary.json"""
    records = outcome.records
    qbers = [r.qber for r in records if r.qber is not None]
    sifted = sum(r.sifted_bits for r in records)
    errors = sum(r.errors for r in records)
    detected = sum(r.detected for r in records)
    qr_sifted = sum(r.qr_sifted for r in records)
    qr_errors = sum(r.qr_errors for r in records)

    # Duty is counted from the same rows that trace.csv holds
    control_seconds = sum(1 for row in outcome.trace if row.phase == 'control')
    qkd_seconds = sum(1 for row in outcome.trace if row.phase == 'qkd')
    total_seconds = control_seconds + qkd_seconds

    converged_cycles = [cycle for cycle in outcome.cycles if cycle.converged]
    controlled = [sample for cycle in converged_cycles for sample in cycle.confirmed_samples]
    all_samples = [sample for cycle in outcome.cycles for sample in cycle.samples]
    iterations = [cycle.iterations for cycle in outcome.cycles]

    return {
        'seed': seed,
        'scenario': bundle.name,
        'duration_s': duration_s,
        'intervals': len(records),
        'qber': {
            **(_stats(qbers) or {'mean': None, 'std': None, 'count': 0}),
            'pooled': errors / sifted if sifted else None,
            'undefined_intervals': len(records) - len(qbers),
            'flagged_intervals': sum(1 for r in records if r.flagged),
            'threshold': bundle.protocol.qber_threshold,
        },
        'qr_basis_qber': qr_errors / qr_sifted if qr_sifted else None,
        'sifted_bits': sifted,
        'errors': errors,
        'detected': detected,
        'sifted_to_detected': sifted / detected if detected else None,
        'control_seconds': control_seconds,
        'qkd_seconds': qkd_seconds,
        'duty': control_seconds / total_seconds if total_seconds else None,
        'controlled_sop': _sop_stats(controlled),
        'control_samples_sop': _sop_stats(all_samples),
        'convergence': {
            'cycles': len(outcome.cycles),
            'converged': len(converged_cycles),
            'failures': outcome.failures,
            'failure_budget': failure_budget,
            'median_samples': float(np.median(iterations)) if iterations else None,
            'max_samples': int(max(iterations)) if iterations else None,
        },
        'config': bundle.resolved(),
    }


def write_artifacts(outcome: SessionOutcome, summary: Dict, out_dir: str) -> Dict[str, str]:
    """Write trace.csv, qber.csv and summary.json; returns their paths"""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'trace': os.path.join(out_dir, TRACE_FILE),
        'qber': os.path.join(out_dir, QBER_FILE),
        'summary': os.path.join(out_dir, SUMMARY_FILE),
    }
    _write_csv(trace_frame(outcome.trace), paths['trace'])
    _write_csv(qber_frame(outcome.records), paths['qber'])
    with open(paths['summary'], 'w', encoding='utf-8') as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
        handle.write('\n')
    for name, path in paths.items():
        logger.info(f"Wrote {name} to {path}")
    return paths


def read_trace(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


def duty_from_trace(frame: pd.DataFrame) -> float:
    counts = frame['phase'].value_counts()
    control = int(counts.get('control', 0))
    qkd = int(counts.get('qkd', 0))
    return control / (control + qkd)
