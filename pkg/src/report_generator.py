"""
Report Generator
Generates an HTML run report with plotly charts from a MetricsReport
"""

from jinja2 import Template
from typing import Dict, List
import plotly.graph_objects as go
import logging

from .eval_metrics import MetricsReport

logger = logging.getLogger(__name__)

STAGE_ORDER = ['direct', 'fda', 'final']


class ReportGenerator:
    """Generate HTML reports with visualizations"""

    def __init__(self, title: str = 'Anti-Noise Learning Run'):
        """
        Initialize report generator

        Args:
            title: Page title
        """
        self.title = title

    def generate_html_report(self, report: MetricsReport, output_path: str):
        """
        Generate the run report

        Args:
            report: Metrics of a finished run
            output_path: Path to save HTML report
        """
        charts = self._generate_charts(report)
        html_content = self._build_html(report, charts)

        with open(output_path, 'w', encoding='utf-8') as f:
            f.write(html_content)

        logger.info(f"✅ HTML report generated: {output_path}")

    def _generate_charts(self, report: MetricsReport) -> Dict:
        """Generate all charts for the report"""

        charts = {}

        charts['cmc'] = self._create_cmc_chart(report)
        charts['f_trace'] = self._create_f_trace_chart(report)
        charts['fda_losses'] = self._create_loss_chart(
            report.traces.get('fda', []), ['l_ce', 'l_cl', 'l_g', 'l_d'], 'Alignment Losses')
        charts['main_losses'] = self._create_loss_chart(
            report.traces.get('main', []), ['l_ce', 'l_triplet'], 'Main Model Losses')
        charts['partitions'] = self._create_partition_chart(report.partitions)

        return charts

    def _create_cmc_chart(self, report: MetricsReport) -> str:
        """CMC curve of every evaluated stage"""

        fig = go.Figure()
        for name in STAGE_ORDER:
            stage = report.stages.get(name)
            if not stage or not stage.get('cmc'):
                continue
            cmc = stage['cmc'][:20]
            fig.add_trace(go.Scatter(x=list(range(1, len(cmc) + 1)), y=cmc, mode='lines+markers', name=name))

        fig.update_layout(
            title='CMC Curve',
            xaxis_title='Rank',
            yaxis_title='Matching rate',
            yaxis_range=[0, 1.05],
            height=400
        )

        return fig.to_html(full_html=False, include_plotlyjs='cdn')

    def _create_f_trace_chart(self, report: MetricsReport) -> str:
        """Pseudo-label F-value per stage and selection round"""

        stages = [row['stage'] for row in report.f_trace]
        fig = go.Figure(data=[
            go.Bar(name='Precision', x=stages, y=[row['precision'] for row in report.f_trace], marker_color='#4285F4'),
            go.Bar(name='Recall', x=stages, y=[row['recall'] for row in report.f_trace], marker_color='#FBBC04'),
            go.Bar(name='F', x=stages, y=[row['f'] for row in report.f_trace], marker_color='#34A853'),
        ])

        fig.update_layout(
            title='Pseudo-label Quality',
            barmode='group',
            yaxis_range=[0, 1.05],
            height=400
        )

        return fig.to_html(full_html=False, include_plotlyjs='cdn')

    def _create_loss_chart(self, rows: List[Dict], columns: List[str], title: str) -> str:
        """One line per loss column over epochs"""

        fig = go.Figure()
        epochs = list(range(1, len(rows) + 1))
        for col in columns:
            fig.add_trace(go.Scatter(x=epochs, y=[row.get(col) for row in rows], mode='lines', name=col))

        fig.update_layout(
            title=title,
            xaxis_title='Epoch',
            height=350
        )

        return fig.to_html(full_html=False, include_plotlyjs='cdn')

    def _create_partition_chart(self, partitions: List[Dict]) -> str:
        """Reliable / rejected / outlier counts per selection round"""

        rounds = [str(p['round']) for p in partitions]
        fig = go.Figure(data=[
            go.Bar(name='Reliable', x=rounds, y=[p['reliable'] for p in partitions], marker_color='#34A853'),
            go.Bar(name='Rejected', x=rounds, y=[p['rejected'] for p in partitions], marker_color='#EA4335'),
            go.Bar(name='Outliers', x=rounds, y=[p['outliers'] for p in partitions], marker_color='#9C27B0'),
        ])

        fig.update_layout(
            title='Training Partition by Round',
            barmode='stack',
            xaxis_title='Round',
            height=350
        )

        return fig.to_html(full_html=False, include_plotlyjs='cdn')

    def _build_html(self, report: MetricsReport, charts: Dict) -> str:
        """Build complete HTML report"""

        template = """
<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{{ title }}</title>
    <style>
        * { margin: 0; padding: 0; box-sizing: border-box; }

        body {
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, Oxygen, Ubuntu, Cantarell, sans-serif;
            background: #f5f5f5;
            color: #333;
            line-height: 1.6;
        }

        .container { max-width: 1200px; margin: 0 auto; padding: 20px; }

        header {
            background: linear-gradient(135deg, #667eea 0%, #764ba2 100%);
            color: white;
            padding: 40px 20px;
            text-align: center;
            border-radius: 10px;
            margin-bottom: 30px;
        }

        .metrics-grid {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(220px, 1fr));
            gap: 20px;
            margin-bottom: 30px;
        }

        .metric-card {
            background: white;
            padding: 25px;
            border-radius: 10px;
            box-shadow: 0 2px 10px rgba(0,0,0,0.1);
        }

        .metric-card h3 { color: #666; font-size: 0.9em; text-transform: uppercase; margin-bottom: 10px; }
        .metric-value { font-size: 2.2em; font-weight: bold; color: #667eea; }
        .metric-label { color: #999; font-size: 0.9em; margin-top: 5px; }

        .section {
            background: white;
            padding: 30px;
            border-radius: 10px;
            box-shadow: 0 2px 10px rgba(0,0,0,0.1);
            margin-bottom: 30px;
        }

        .section h2 { margin-bottom: 20px; border-bottom: 3px solid #667eea; padding-bottom: 10px; }
        table { width: 100%; border-collapse: collapse; }
        th, td { text-align: left; padding: 6px 10px; border-bottom: 1px solid #e0e0e0; }
        footer { text-align: center; padding: 20px; color: #999; font-size: 0.9em; }
    </style>
</head>
<body>
    <div class="container">
        <header>
            <h1>{{ title }}</h1>
            <p>seed {{ seed }}</p>
        </header>

        <div class="metrics-grid">
            {% for name, stage in stages %}
            <div class="metric-card">
                <h3>{{ name }}</h3>
                <div class="metric-value">{{ '%.1f' % (100 * stage.map) }}%</div>
                <div class="metric-label">mAP &middot; rank-1 {{ '%.1f' % (100 * stage.rank1) }}%</div>
            </div>
            {% endfor %}
        </div>

        <div class="section">
            <h2>Retrieval</h2>
            <div class="chart-container">{{ cmc_chart }}</div>
        </div>

        <div class="section">
            <h2>Pseudo-labels</h2>
            <div class="chart-container">{{ f_trace_chart }}</div>
            {% if has_partitions %}<div class="chart-container">{{ partitions_chart }}</div>{% endif %}
        </div>

        <div class="section">
            <h2>Training</h2>
            <div class="chart-container">{{ fda_losses_chart }}</div>
            {% if has_main %}<div class="chart-container">{{ main_losses_chart }}</div>{% endif %}
        </div>

        <div class="section">
            <h2>Configuration</h2>
            <table>
                {% for key, value in config %}
                <tr><th>{{ key }}</th><td>{{ value }}</td></tr>
                {% endfor %}
            </table>
        </div>

        <footer>
            <p>Generated by anl_lab</p>
        </footer>
    </div>
</body>
</html>
"""

        return Template(template).render(
            title=self.title,
            seed=report.seed,
            stages=[(name, report.stages[name]) for name in STAGE_ORDER if name in report.stages],
            config=sorted(report.config.items()),
            has_partitions=bool(report.partitions),
            has_main=bool(report.traces.get('main')),
            cmc_chart=charts['cmc'],
            f_trace_chart=charts['f_trace'],
            fda_losses_chart=charts['fda_losses'],
            main_losses_chart=charts['main_losses'],
            partitions_chart=charts['partitions'],
        )
