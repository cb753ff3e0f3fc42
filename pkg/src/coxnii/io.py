import json
import os
from abc import ABCMeta, abstractmethod
from pathlib import Path
from typing import Optional

import pandas as pd

from coxnii.diagnostics import BvmReport, emit_report, parse_report
from coxnii.survival import SurvivalDataset, parse_dataset, serialize_dataset
from coxnii.utils.logs import get_logger

log = get_logger('io')


def _ensure_parent(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


class Serializer(metaclass=ABCMeta):
    default_ext = None

    def __init__(self, ext=None):
        if ext is None:
            self.ext = self.default_ext
        else:
            self.ext = ext

    @abstractmethod
    def read(self, path):
        pass

    @abstractmethod
    def write(self, path, obj):
        pass


class DatasetSerializer(Serializer):
    """Survival CSV with header ``time,status,z1,...,zp``."""
    default_ext = 'csv'

    def __init__(self, ext=None, tau: Optional[float] = None):
        super().__init__(ext)
        self.tau = tau

    def read(self, path) -> SurvivalDataset:
        with open(path, 'r', encoding='utf-8') as f:
            return parse_dataset(f.read(), tau=self.tau)

    def write(self, path, obj: SurvivalDataset):
        _ensure_parent(path)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(serialize_dataset(obj))


class JsonSerializer(Serializer):
    default_ext = 'json'

    def read(self, path) -> dict:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)

    def write(self, path, obj: dict):
        _ensure_parent(path)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(obj, f, indent=2)
            f.write('\n')


class ReportSerializer(Serializer):
    """Report as JSON or as (section, key, value) CSV; without ``ext`` the format follows the file extension."""

    def read(self, path) -> BvmReport:
        with open(path, 'r', encoding='utf-8') as f:
            return parse_report(f.read())

    def write(self, path, obj: BvmReport):
        _ensure_parent(path)
        fmt = self.ext or ('csv' if str(path).lower().endswith('.csv') else 'json')
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(emit_report(obj, fmt))


class FrameSerializer(Serializer):
    """Long-format CSV dumps (chain draws, hazard paths, densities)."""
    default_ext = 'csv'

    def read(self, path) -> pd.DataFrame:
        return pd.read_csv(path)

    def write(self, path, obj: pd.DataFrame):
        _ensure_parent(path)
        obj.to_csv(path, index=False, lineterminator='\n')


def _get_serializer(obj=None, file_type: Optional[str] = None) -> Serializer:
    if isinstance(file_type, Serializer):
        return file_type
    if isinstance(obj, SurvivalDataset):
        return DatasetSerializer()
    if isinstance(obj, BvmReport):
        return ReportSerializer()
    if isinstance(obj, pd.DataFrame):
        return FrameSerializer()
    if file_type == 'json':
        return JsonSerializer()
    elif file_type == 'csv':
        return DatasetSerializer()
    raise NotImplementedError(f"Serializer not implemented for file type '{file_type}'")


def _file_type(path) -> str:
    return os.path.splitext(str(path))[1].lstrip('.').lower()


def read(path: str | Path, file_type: Optional[str | Serializer] = None):
    """Read a dataset (``.csv``) or a JSON document; pass a Serializer to read anything else."""
    if not Path(path).exists():
        raise FileNotFoundError(f'No file present at {path}')
    file_type = file_type or _file_type(path)
    log.debug(f'Reading {path} as {file_type}')
    return _get_serializer(file_type=file_type).read(path)


def write(obj, path: str | Path, file_type: Optional[str | Serializer] = None) -> Path:
    file_type = file_type or _file_type(path)
    serializer = _get_serializer(obj, file_type)
    log.info(f'Writing {type(obj).__name__} to {path}')
    serializer.write(path, obj)
    return Path(path)
