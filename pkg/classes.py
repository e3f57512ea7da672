#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Classes tracking the artifacts and summary of a command line run
"""
import os
import logging
from collections import defaultdict, OrderedDict

import tools

logger = logging.getLogger("classes")
logger.debug("loading classes module")


# ~~~~ CUSTOM CLASSES ~~~~~~ #
class RunRecord(object):
    """
    Files, directories and summary values produced by one command

    Parameters
    ----------
    command: str
        the command being run, e.g. ``pretrain``
    output_dir: str
        directory receiving every artifact of the run

    Notes
    -----
    The record logs through ``mapex.<command>``, a child of the ``mapex`` logger, so its messages reach the run log file set up by the entry point

    Examples
    --------
    Example usage::

        run = RunRecord('pretrain', 'out')
        run.set_file('checkpoint', 'out/model.mpx')
        run.summary['final_l_rec'] = 0.21
        run.write_summary()
        run.summary_line()
        # 'pretrain: final_l_rec=0.21 out=out'
    """
    def __init__(self, command, output_dir):
        self.id = 'mapex.{0}'.format(command)
        self.logger = logging.getLogger(self.id)
        self.command = command
        self.output_dir = tools.mkdirs(output_dir, return_path = True)
        # name -> list of paths
        self.files = defaultdict(list)
        self.dirs = defaultdict(list)
        self.summary = OrderedDict()

    def __repr__(self):
        return(self.id)
    def __str__(self):
        return(self.id)

    def list_none(self, l):
        """
        return None for an empty list, or the first element of a list
        """
        if len(l) == 0:
            return(None)
        return(l[0])

    def path(self, filename):
        """
        Path of a file inside the output directory
        """
        return(os.path.join(self.output_dir, filename))

    def set_file(self, name, path):
        if isinstance(path, str):
            self.files[name] = [os.path.abspath(path)]
        else:
            self.files[name] = [os.path.abspath(p) for p in path]
        self.logger.debug('{0}: {1}'.format(name, ', '.join(self.files[name])))

    def add_file(self, name, path):
        self.files[name].append(os.path.abspath(path))

    def set_dir(self, name, path):
        self.dirs[name] = [os.path.abspath(path)]

    def get_file(self, name):
        return(self.list_none(self.files[name]))

    def get_files(self, name):
        return(self.files[name])

    def write_summary(self):
        """
        Write ``summary.json`` with the summary values and the artifact paths, and log the summary line
        """
        path = self.path('summary.json')
        record = OrderedDict([('command', self.command), ('summary', self.summary),
            ('files', dict(self.files)), ('dirs', dict(self.dirs))])
        tools.write_json(record, path)
        self.add_file('summary', path)
        self.logger.info(self.summary_line())
        return(path)

    def summary_line(self):
        """
        One-line description of the run: ``<command>: key=value ... out=<dir>``
        """
        parts = ['{0}={1}'.format(k, v) for k, v in self.summary.items()]
        parts.append('out={0}'.format(self.output_dir))
        return('{0}: {1}'.format(self.command, ' '.join(parts)))
