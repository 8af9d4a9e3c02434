"""
Module holding the data behind every figure as plain objects which can be exported as tab-delimited text
for plotting elsewhere
"""

import math
from typing import Optional

from KDFollowLanguage import get_text


def chart_value(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return str(x)


# ---------- Chart Data Classes ---------- #
class BaseChartData:
    def __init__(self):
        self.name = ""


class LineData(BaseChartData):
    """
    an object to contain a line with one or more segments
    """
    def __init__(self):
        super().__init__()
        self.x_values = None
        self.y_values = None

    def export_to_list(self) -> list:
        outlist = ["Line Data\n",
                   "Name\t{}\n".format(self.name),
                   "x\ty\n"]
        for i in range(len(self.x_values)):
            outlist.append("{}\t{}\n".format(chart_value(self.x_values[i]), chart_value(self.y_values[i])))
        return outlist


class BarData(BaseChartData):
    """
    an object to contain one labeled value per bar
    """
    def __init__(self):
        super().__init__()
        self.labels = None
        self.values = None

    def export_to_list(self) -> list:
        outlist = ["Bar Data\n",
                   "Name\t{}\n".format(self.name),
                   "label\tvalue\n"]
        for i in range(len(self.labels)):
            outlist.append("{}\t{}\n".format(self.labels[i], chart_value(self.values[i])))
        return outlist


class ChartData:
    """
    an object to contain all data that appears on a chart
    """
    def __init__(self, caption: str = ""):
        self.x_label = ""
        self.y_label = ""
        self.caption = caption
        self.data = []

    def add_multi_line(self, name: str, x_values, y_values) -> LineData:
        new_ml = LineData()
        new_ml.name = name
        new_ml.x_values = list(x_values)
        new_ml.y_values = list(y_values)
        self.data.append(new_ml)
        return new_ml

    def add_bars(self, name: str, labels, values) -> BarData:
        new_bars = BarData()
        new_bars.name = name
        new_bars.labels = list(labels)
        new_bars.values = list(values)
        self.data.append(new_bars)
        return new_bars

    def export_to_list(self) -> list:
        outlist = ["Caption\t{}\n".format(self.caption),
                   "X-axis label\t{}\n".format(self.x_label),
                   "Y-axis label\t{}\n\n\n".format(self.y_label)]
        for dat in self.data:
            outlist.extend(dat.export_to_list())
            outlist.append("\n\n")
        return outlist


def write_chart(chart_data: ChartData, filename: str) -> None:
    with open(filename, "w") as outfile:
        outfile.writelines(chart_data.export_to_list())


def chart_binned_statistic(caption: str, y_label: str, bin_edges, values_by_class: dict,
                           x_label: Optional[str] = None) -> ChartData:
    """
    one line per pair class over the bin midpoints; empty cells are left blank
    """
    chart_data = ChartData(get_text(caption))
    chart_data.x_label = get_text("Spacing (m)") if x_label is None else x_label
    chart_data.y_label = get_text(y_label)
    midpoints = [(a + b) / 2 for a, b in zip(bin_edges, bin_edges[1:])]
    for pair_class, values in values_by_class.items():
        chart_data.add_multi_line(pair_class, midpoints, values)
    return chart_data


def chart_grouped_bars(caption: str, y_label: str, values_by_series: dict) -> ChartData:
    """
    one bar series per model (or other grouping), each holding a value per label
    """
    chart_data = ChartData(get_text(caption))
    chart_data.y_label = get_text(y_label)
    for name, values in values_by_series.items():
        chart_data.add_bars(name, list(values.keys()), list(values.values()))
    return chart_data
