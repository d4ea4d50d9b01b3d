import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DictionaryParseError, DuplicateNameError, EmptyLayoutError

logger = logging.getLogger(__name__)

# Leading modality token, e.g. "EEG FP1-REF", "EEG:C3". Requires a separator so that
# index names such as "EEG001" are left intact.
_MODALITY_PREFIX = re.compile(r'^(?:EEG|EOG|EMG|ECG|EKG|MEG)[\s:_]+', re.IGNORECASE)
_REFERENCE_SUFFIX = re.compile(r'-(?:REF|LE|AVG)$', re.IGNORECASE)
_MAX_COORDINATE = 0.5


class ChannelType(str, Enum):
    EEG = 'EEG'
    EOG = 'EOG'
    EMG = 'EMG'
    ECG = 'ECG'
    OTHER = 'OTHER'


class DropReason(str, Enum):
    NOT_IN_DICTIONARY = 'NotInDictionary'
    NON_EEG_MODALITY = 'NonEEGModality'
    DUPLICATE = 'Duplicate'


@dataclass(frozen=True)
class ElectrodeEntry:
    """One named electrode of the global dictionary."""
    name: str
    channel_type: ChannelType
    position: Tuple[float, float, float]
    system: str = ''

    def describe(self) -> str:
        """Machine-readable one-line description: ``name type x y z``."""
        x, y, z = self.position
        return f"{self.name} {self.channel_type.value} {x:g} {y:g} {z:g}"


@dataclass(frozen=True, eq=False)
class LayoutMapping:
    """Resolution of one recording subset's channel list against the dictionary.

    Attributes:
        subset_id: Opaque identifier of the subset
        kept_indices: Source-channel indices that survived, strictly increasing
        kept_names: Canonical dictionary names of the kept channels
        coordinates: |kept| x 3 matrix of head-frame positions
        dropped: (source index, reason) for every channel that was excluded
    """
    subset_id: str
    kept_indices: Tuple[int, ...]
    kept_names: Tuple[str, ...]
    coordinates: np.ndarray = field(repr=False)
    dropped: Tuple[Tuple[int, DropReason], ...] = ()

    @property
    def channel_count(self) -> int:
        return len(self.kept_indices)

    @property
    def signature(self) -> str:
        return layout_signature(self)


def normalize_name(raw_name: str) -> str:
    """
    Normalize a raw channel label for dictionary matching.

    Strips whitespace, a leading modality token ("EEG ", "EOG:", ...), trailing
    dot padding ("Fc5." -> "Fc5"), trailing reference suffixes ("-REF", "-LE")
    and folds case.

    Args:
        raw_name: Channel label as found in a recording header

    Returns:
        Case-folded key used by the dictionary's name index
    """
    name = re.sub(r'\s+', ' ', str(raw_name).strip())
    name = _MODALITY_PREFIX.sub('', name)
    name = name.rstrip('.').strip()
    name = _REFERENCE_SUFFIX.sub('', name)
    name = name.rstrip('.').strip()
    return name.casefold()


class GlobalDictionary:
    """
    Immutable collection of electrodes keyed by normalized name.

    Safe to share between threads once constructed.
    """

    def __init__(self, entries: Iterable[ElectrodeEntry] = ()):
        self._entries: Tuple[ElectrodeEntry, ...] = tuple(entries)
        index: Dict[str, int] = {}
        for position, entry in enumerate(self._entries):
            key = normalize_name(entry.name)
            if not key:
                raise DictionaryParseError(position + 1, "empty electrode name")
            if key in index:
                raise DuplicateNameError(entry.name)
            index[key] = position
        self._name_index = index

    @property
    def entries(self) -> Tuple[ElectrodeEntry, ...]:
        return self._entries

    @property
    def name_index(self) -> Dict[str, int]:
        return dict(self._name_index)

    def names(self) -> List[str]:
        return [entry.name for entry in self._entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, raw_name: str) -> bool:
        return self.lookup(raw_name) is not None

    def lookup(self, raw_name: str) -> Optional[ElectrodeEntry]:
        """Resolve a raw label; returns None when nothing matches."""
        position = self._name_index.get(normalize_name(raw_name))
        if position is None:
            return None
        return self._entries[position]


def _parse_row(text: str, line_no: int) -> ElectrodeEntry:
    fields = [part.strip() for part in text.split(',')]
    if len(fields) != 6:
        raise DictionaryParseError(line_no, f"expected 6 comma-separated fields, got {len(fields)}")

    name, system, type_name, *coords = fields
    if not name:
        raise DictionaryParseError(line_no, "empty electrode name")

    try:
        channel_type = ChannelType(type_name.upper())
    except ValueError:
        raise DictionaryParseError(line_no, f"unknown channel type {type_name!r}")

    try:
        position = tuple(float(value) for value in coords)
    except ValueError:
        raise DictionaryParseError(line_no, f"non-numeric coordinate in {coords}")

    for value in position:
        if not math.isfinite(value) or abs(value) >= _MAX_COORDINATE:
            raise DictionaryParseError(line_no, f"coordinate {value} outside head scale")

    return ElectrodeEntry(name=name, channel_type=channel_type, position=position, system=system)


def parse_dictionary_lines(lines: Iterable[str]) -> GlobalDictionary:
    """
    Parse dictionary text rows (``name, system, type, x, y, z``).

    Args:
        lines: Raw text lines; ``#`` comment lines and blank lines are skipped

    Returns:
        GlobalDictionary with entries in file order

    Raises:
        DictionaryParseError: Malformed row
        DuplicateNameError: Two rows normalize to the same name
    """
    entries: List[ElectrodeEntry] = []
    seen: Dict[str, int] = {}
    for line_no, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text or text.startswith('#'):
            continue
        entry = _parse_row(text, line_no)
        key = normalize_name(entry.name)
        if key in seen:
            raise DuplicateNameError(entry.name, line_no)
        seen[key] = line_no
        entries.append(entry)
    return GlobalDictionary(entries)


def load_dictionary(source: Union[str, Path]) -> GlobalDictionary:
    """
    Load the global electrode dictionary from a text file.

    Args:
        source: Path to a UTF-8 dictionary file

    Returns:
        GlobalDictionary in file order
    """
    path = Path(source)
    with path.open(encoding='utf-8') as handle:
        dictionary = parse_dictionary_lines(handle)
    logger.info(f"Loaded {len(dictionary)} electrodes from {path}")
    return dictionary


def validate_dictionary_file(source: Union[str, Path]) -> List[str]:
    """
    Collect every problem in a dictionary file instead of stopping at the first.

    Returns:
        List of "line N: message" strings; empty when the file is valid
    """
    problems: List[str] = []
    seen: Dict[str, int] = {}
    with Path(source).open(encoding='utf-8') as handle:
        for line_no, raw in enumerate(handle, start=1):
            text = raw.strip()
            if not text or text.startswith('#'):
                continue
            try:
                entry = _parse_row(text, line_no)
            except DictionaryParseError as e:
                problems.append(str(e))
                continue
            key = normalize_name(entry.name)
            if key in seen:
                problems.append(
                    f"line {line_no}: duplicate electrode name {entry.name!r} (first at line {seen[key]})"
                )
            else:
                seen[key] = line_no
    return problems


def lookup(dictionary: GlobalDictionary, raw_name: str) -> Optional[ElectrodeEntry]:
    """Resolve a raw channel label against the dictionary; None means not found."""
    return dictionary.lookup(raw_name)


def map_layout(dictionary: GlobalDictionary, channel_names: Sequence[str], subset_id: str = '') -> LayoutMapping:
    """
    Map a recording's channel list onto the global dictionary.

    Channels are kept when they resolve to an EEG electrode that has not been
    kept already; everything else is dropped with a reason.

    Args:
        dictionary: Global electrode dictionary
        channel_names: Raw channel labels in recording order
        subset_id: Identifier stored on the mapping

    Returns:
        LayoutMapping with kept indices, canonical names and coordinates

    Raises:
        EmptyLayoutError: No channel survives
    """
    if not channel_names:
        raise EmptyLayoutError(f"subset {subset_id!r} declares no channels")

    kept_indices: List[int] = []
    kept_names: List[str] = []
    positions: List[Tuple[float, float, float]] = []
    dropped: List[Tuple[int, DropReason]] = []
    seen = set()

    for index, raw_name in enumerate(channel_names):
        entry = dictionary.lookup(raw_name)
        if entry is None:
            dropped.append((index, DropReason.NOT_IN_DICTIONARY))
        elif entry.channel_type is not ChannelType.EEG:
            dropped.append((index, DropReason.NON_EEG_MODALITY))
        elif entry.name in seen:
            dropped.append((index, DropReason.DUPLICATE))
        else:
            seen.add(entry.name)
            kept_indices.append(index)
            kept_names.append(entry.name)
            positions.append(entry.position)

    if dropped:
        summary = ', '.join(f"{channel_names[i]!r}:{reason.value}" for i, reason in dropped)
        logger.info(f"Subset {subset_id!r}: dropped {len(dropped)} channel(s) - {summary}")

    if not kept_indices:
        raise EmptyLayoutError(f"no EEG channel of subset {subset_id!r} resolves in the dictionary")

    coordinates = np.asarray(positions, dtype=np.float64).reshape(len(positions), 3)
    return LayoutMapping(
        subset_id=subset_id,
        kept_indices=tuple(kept_indices),
        kept_names=tuple(kept_names),
        coordinates=coordinates,
        dropped=tuple(dropped),
    )


def signature_for_names(names: Sequence[str]) -> str:
    """Order-sensitive hash of a canonical name list."""
    digest = hashlib.sha256('\n'.join(names).encode('utf-8')).hexdigest()
    return digest[:16]


def layout_signature(mapping: LayoutMapping) -> str:
    """Stable grouping key of a layout: equal ordered name lists give equal signatures."""
    return signature_for_names(mapping.kept_names)

