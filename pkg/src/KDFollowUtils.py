"""
Module with a number of general utility functions
"""

from typing import Optional
import hashlib
import json
import math
import zlib

import numpy


def inline_float(decimal_places: int) -> str:
    """
    format a floating-point number displayed within inline text with the desired number of decimal places
    """
    return "0.{}f".format(decimal_places)


def format_number(number, width: int = 0, decimals: int = 2) -> str:
    """
    optimally format a number

    if the number is an integer, format it as such, if it is missing, report it as "—", otherwise, format it
    as a floating point number
    """
    if number is None:
        return format("—", ">{}".format(width))
    if isinstance(number, (int, numpy.integer)):
        return format(int(number), "{}d".format(width))
    if math.isinf(number):
        return format("inf" if number > 0 else "-inf", ">{}".format(width))
    return format(number, "{}.{}f".format(width, decimals))


def create_output_table(output_text: list, table_data: list, col_headers: list, col_formats: list,
                        out_dec: int = 2, sbc: int = 3, line_after: Optional[list] = None) -> None:
    """
    Create a well-formatted set of strings representing an output table, including headers and computationally
    determined spacing of columns. The table is added to a list provided as input so can be inserted into a
    broader set of output strings.

    :param output_text: a list where the output will be appended
    :param table_data: a list of lists containing the data to appear in the table; each sublist represents a row
                       of the table and must contain the same number of columns
    :param col_headers: a list containing strings representing headers for each column in the table
    :param col_formats: a list of "f" (float), "d" (integer) or "" (text) for each column
    :param out_dec: the number of decimal places to output floating point numbers in the table
    :param sbc: the number of spaces to use between each column in the table
    :param line_after: add an extra line of hyphens after each row number in the list, if present
    """
    cells = []
    for row in table_data:
        new_row = []
        for i, x in enumerate(row):
            if col_formats[i] in ("f", "d"):
                new_row.append(format_number(x, decimals=out_dec))
            else:
                new_row.append(str(x))
        cells.append(new_row)

    # determine maximum width for each column
    max_width = [len(h) for h in col_headers]
    for row in cells:
        for i, x in enumerate(row):
            max_width[i] = max(max_width[i], len(x))

    col_spacer = " "*sbc
    header = col_spacer.join(format(h, "^{}".format(max_width[i])) for i, h in enumerate(col_headers))
    output_text.append(header)
    header_line_width = sum(max_width) + (len(col_headers)-1)*sbc
    output_text.append("-"*header_line_width)
    for r, row in enumerate(cells):
        cols = []
        for i, x in enumerate(row):
            j = "<" if i == 0 else ">"  # left justify first column
            cols.append(format(x, "{}{}".format(j, max_width[i])))
        output_text.append(col_spacer.join(cols))
        if (line_after is not None) and (r in line_after):
            output_text.append("-"*header_line_width)


def blocks_to_text(output_blocks: list) -> str:
    """
    flatten a list of output blocks (each a list of lines) into a single string, blocks separated by blank lines
    """
    return "\n\n".join("\n".join(block) for block in output_blocks) + "\n"


def file_hash(filename: str) -> str:
    """
    sha256 digest of a file's contents
    """
    digest = hashlib.sha256()
    with open(filename, "rb") as infile:
        for chunk in iter(lambda: infile.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def text_hash(text: str, length: int = 12) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def stage_seed(root_seed: int, stage: str) -> int:
    """
    expand the root seed into an independent seed for a named stage of the pipeline
    """
    sequence = numpy.random.SeedSequence([int(root_seed), zlib.crc32(stage.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=numpy.uint32)[0])


def parse_float_list(value: str) -> list:
    """
    parse a comma separated list of numbers, or a start:stop:step range (inclusive of stop)
    """
    value = value.strip()
    if ":" in value:
        start, stop, step = (float(x) for x in value.split(":"))
        if step <= 0:
            raise ValueError(value)
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i*step, 10) for i in range(n)]
    return [float(x) for x in value.split(",") if x.strip() != ""]


def parse_int_list(value: str) -> list:
    return [int(x) for x in value.split(",") if x.strip() != ""]


def json_value(value):
    """
    convert numpy scalars and arrays to plain values; infinities become the string "inf", NaN becomes null
    """
    if isinstance(value, dict):
        return {str(k): json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_value(v) for v in value]
    if isinstance(value, numpy.ndarray):
        return json_value(value.tolist())
    if isinstance(value, (bool, numpy.bool_)):
        return bool(value)
    if isinstance(value, (int, numpy.integer)):
        return int(value)
    if isinstance(value, (float, numpy.floating)):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return float(value)
    return value


def write_json(payload, filename: str) -> None:
    with open(filename, "w", encoding="utf-8") as outfile:
        json.dump(json_value(payload), outfile, indent=2, sort_keys=True, allow_nan=False)
        outfile.write("\n")
