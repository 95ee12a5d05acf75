"""Regenerate the bundled fixture files from their programmatic builders."""

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from orpdkit import fixtures
from orpdkit.datagen import inputs_to_table, write_table
from orpdkit.grid import parse_grid

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "orpdkit", "fixtures_data")


def main():
    os.makedirs(OUT, exist_ok=True)
    for name in ("small14", "uruguay107"):
        doc = fixtures.fixture_document(name)
        parse_grid(doc)  # refuse to ship an invalid fixture
        path = os.path.join(OUT, f"{name}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print("wrote", path)

    grid = parse_grid(fixtures.fixture_document("small14"))
    nominal = fixtures.small14_nominal(grid)
    nominal.timestamp = "2021-01-01T00:00:00"
    table = inputs_to_table([nominal], grid)
    path = os.path.join(OUT, "small14_nominal.csv")
    write_table(table, path)
    print("wrote", path)


if __name__ == "__main__":
    main()
