"""Convert the PySAL ``nat`` example (3085 lower-48 counties, queen contiguity)
into ``counties.csv`` / ``adjacency.csv`` in the layout read by ``stva.geo_graph``.

Usage: python scripts/make_nat_fixture.py <path/to/pysal/examples/nat> <outdir>

The source ships with PySAL 1.14 (``pip download --no-binary :all: pysal==1.14.4``).
County FIPS follow the 1990 vintage: Miami-Dade is 12025 and the five NYC
boroughs are merged into 36005.
"""

import csv
import json
import sys
from pathlib import Path

from shapely.geometry import shape

STATE_ABBR = {
    "01": "AL", "04": "AZ", "05": "AR", "06": "CA", "08": "CO", "09": "CT", "10": "DE",
    "11": "DC", "12": "FL", "13": "GA", "16": "ID", "17": "IL", "18": "IN", "19": "IA",
    "20": "KS", "21": "KY", "22": "LA", "23": "ME", "24": "MD", "25": "MA", "26": "MI",
    "27": "MN", "28": "MS", "29": "MO", "30": "MT", "31": "NE", "32": "NV", "33": "NH",
    "34": "NJ", "35": "NM", "36": "NY", "37": "NC", "38": "ND", "39": "OH", "40": "OK",
    "41": "OR", "42": "PA", "44": "RI", "45": "SC", "46": "SD", "47": "TN", "48": "TX",
    "49": "UT", "50": "VT", "51": "VA", "53": "WA", "54": "WV", "55": "WI", "56": "WY",
}

# New York, Los Angeles, Chicago, San Francisco, Seattle, Atlanta, Miami,
# Washington D.C., Boston, Houston
HUBS = {"36005", "06037", "17031", "06075", "53033", "13121", "12025", "11001", "25025", "48201"}


def main(src: Path, out: Path) -> None:
    features = json.loads((src / "nat.geojson").read_text())["features"]
    rows = []
    for f in features:
        p = f["properties"]
        c = shape(f["geometry"]).centroid
        rows.append((p["FIPS"], p["NAME"], STATE_ABBR[p["STATE_FIPS"]], round(c.y, 6), round(c.x, 6)))
    rows.sort()
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "counties.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fips", "name", "state", "lat", "lon", "is_hub"])
        for fips, name, st, lat, lon in rows:
            w.writerow([fips, name, st, lat, lon, int(fips in HUBS)])

    edges = set()
    lines = (src / "nat_queen.gal").read_text().split("\n")[1:]
    for head, nbrs in zip(lines[0::2], lines[1::2]):
        a = head.split()[0].zfill(5)
        for b in nbrs.split():
            b = b.zfill(5)
            edges.add((min(a, b), max(a, b)))
    with open(out / "adjacency.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fips_a", "fips_b"])
        w.writerows(sorted(edges))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
