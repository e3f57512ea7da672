#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
General utility functions, error classes and file helpers shared by the MAPEX modules
"""
import os
import csv
import json
import errno
import hashlib
import logging
logger = logging.getLogger("tools")
logger.debug("loading tools module")


# ~~~~ ERRORS ~~~~~~ #
class MapexError(Exception):
    """
    Base class for every error raised by the MAPEX modules; the command line entry point catches this class and exits with status 1
    """
    pass

class DimensionError(MapexError):
    """
    Raised when tensor shapes or axes do not agree
    """
    pass

class ContractError(MapexError):
    """
    Raised when a function is called outside of its documented preconditions
    """
    pass

class NumericError(MapexError):
    """
    Raised on non-finite values; ``step`` holds the training step index when known
    """
    def __init__(self, message, step = None):
        if step is not None:
            message = '{0} (step {1})'.format(message, step)
        MapexError.__init__(self, message)
        self.step = step

class DataError(MapexError):
    """
    Raised when a dataset cannot satisfy a request (empty split, too few samples per class)
    """
    pass

class DegenerateMaskError(DataError):
    """
    Raised when a loss mask selects no elements
    """
    pass

class DegenerateChannelError(DataError):
    """
    Raised when a channel has zero standard deviation and cannot be normalized
    """
    pass

class ConfigError(MapexError):
    """
    Raised for invalid configuration; ``key`` names the offending key when known
    """
    def __init__(self, message, key = None):
        if key is not None:
            message = '{0}: {1}'.format(key, message)
        MapexError.__init__(self, message)
        self.key = key

class ModalityUnavailableError(MapexError):
    """
    Raised when a model is asked to process a modality it does not hold (e.g. pruned away)
    """
    pass

class SpecError(MapexError):
    """
    Raised for an invalid PruneSpec (empty or unknown modalities, k out of range)
    """
    pass

class CheckpointError(MapexError):
    """
    Raised when a checkpoint file is truncated, corrupt, or does not match the model it describes
    """
    pass


# ~~~~ CUSTOM FUNCTIONS ~~~~~~ #
def mkdirs(path, return_path = False):
    """
    Make a directory, and all parent dir's in the path
    """
    try:
        os.makedirs(path)
    except OSError as exc:
        if exc.errno == errno.EEXIST and os.path.isdir(path):
            pass
        else:
            raise
    if return_path:
        return(path)

def item_exists(item, item_type = 'any', n = False):
    """
    Check that an item exists
    item_type is 'any', 'file', 'dir'
    n is True or False and negates 'exists'
    """
    exists = False
    if item_type == 'any':
        exists = os.path.exists(item)
    elif item_type == 'file':
        exists = os.path.isfile(item)
    elif item_type == 'dir':
        exists = os.path.isdir(item)
    if n:
        exists = not exists
    return(exists)

def write_dicts_to_csv(dict_list, output_file, fieldnames = None):
    """
    Write a list of dicts to a CSV file

    Parameters
    ----------
    dict_list: list
        rows to write; every row must hold the same keys
    output_file: str
        path to the CSV file to create
    fieldnames: list
        column order; defaults to the keys of the first row

    Notes
    -----
    Line endings are forced to ``\\n`` so that repeated runs produce byte-identical files on every platform
    """
    if fieldnames is None:
        fieldnames = list(dict_list[0].keys())
    with open(output_file, 'w', newline = '') as outfile:
        fp = csv.DictWriter(outfile, fieldnames = fieldnames, lineterminator = '\n')
        fp.writeheader()
        fp.writerows(dict_list)
    logger.debug('Wrote {0} rows to {1}'.format(len(dict_list), output_file))

def read_csv_dicts(input_file):
    """
    Read a CSV file back into a list of dicts (all values are str)
    """
    with open(input_file, 'r', newline = '') as f:
        reader = csv.DictReader(f)
        rows = [row for row in reader]
    return(rows)

def write_json(object, output_file):
    with open(output_file, "w") as f:
        json.dump(object, f, sort_keys = True, indent = 4)

def load_json(input_file):
    with open(input_file, "r") as f:
        my_item = json.load(f)
    return(my_item)

def md5_bytes(data):
    """
    Return the hex md5 digest of a bytes object
    """
    return(hashlib.md5(data).hexdigest())

def md5_file(input_file):
    """
    Return the hex md5 digest of a file's contents
    """
    with open(input_file, 'rb') as f:
        digest = hashlib.md5(f.read()).hexdigest()
    return(digest)

def parse_int_list(value):
    """
    Parse a comma separated list of ints; accepts a list, an int, or a string like ``0,1,2``

    Returns
    -------
    list
        a list of int
    """
    if isinstance(value, (list, tuple)):
        return([int(v) for v in value])
    if isinstance(value, int):
        return([value])
    value = str(value).strip()
    if value == '':
        return([])
    return([int(v) for v in value.split(',')])
