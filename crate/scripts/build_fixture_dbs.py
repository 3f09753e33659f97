#!/usr/bin/env python3
"""Rebuild fixtures/database/<db>/<db>.sqlite from the schema.sql next to it."""
import os
import sqlite3
import sys

root = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "fixtures", "database")
for db_id in sorted(os.listdir(root)):
    script = os.path.join(root, db_id, "schema.sql")
    if not os.path.isfile(script):
        continue
    target = os.path.join(root, db_id, db_id + ".sqlite")
    if os.path.exists(target):
        os.remove(target)
    conn = sqlite3.connect(target)
    with open(script) as fh:
        conn.executescript(fh.read())
    conn.commit()
    conn.close()
    print(target, file=sys.stderr)
