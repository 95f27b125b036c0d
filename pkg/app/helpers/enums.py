import enum


class Modality(str, enum.Enum):
    WSI = 'wsi'
    RNA = 'rna'
    DNAM = 'dnam'
    CNV = 'cnv'

    @classmethod
    def omics(cls):
        return (cls.RNA, cls.DNAM, cls.CNV)

    @classmethod
    def parse(cls, name: str) -> "Modality":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown modality '{name}'")


OMICS_MODALITIES = Modality.omics()


class HistoMode(str, enum.Enum):
    PROTOTYPE = 'prototype'
    ABMIL = 'abmil'


class FinetuneTask(str, enum.Enum):
    SUBTYPE = 'subtype'
    SURVIVAL = 'survival'


class FinetuneScope(str, enum.Enum):
    FULL = 'full'
    HISTO = 'histo'


class ValueSpace(str, enum.Enum):
    RAW = 'raw'
    TRANSFORMED = 'transformed'


class CohortSplit(str, enum.Enum):
    PRETRAIN = 'pretrain'
    DOWNSTREAM = 'downstream'
