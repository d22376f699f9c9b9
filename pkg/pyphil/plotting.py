from graphviz import Digraph

from .cosim import validate_wiring


def _impedance_label(impedance):
    label = f'{impedance.kind}\\nR={impedance.resistance_ohm:.4g} ohm'
    if impedance.kind == 'series-rl':
        label += f'\\nL={impedance.inductance_h:.4g} H'
    elif impedance.kind == 'parallel-rc':
        label += f'\\nC={impedance.capacitance_f:.4g} F'
    return label


def plot_loop(loop, view=True, **kwargs):
    """Draw the block diagram of a PHIL loop.

    The simulated side is on the left, the power interface in the middle
    and the HUT on the right. The feedback path carries the measured
    current back to the simulated source impedance.

    Requires the graphviz python package and binary program.

    kwargs are passed to graphviz.Digraph()

    Example: plotting.plot_loop(loop, view=False, filename='loop') will
    silently save the diagram to loop.pdf
    """
    loop._validate_parameters()
    graph = Digraph(**kwargs)
    graph.attr(rankdir='LR')

    source = loop.source
    harmonics = ', '.join(f'h{h}: {a:.3g} V' for h, a, _ in source.harmonics)
    graph.node('source', label=f'source e(t)\\nf0={source.fundamental_hz:g} '
                               f'Hz\\n{harmonics}', shape='circle')
    graph.node('z_source', label='G_s\\n' +
               _impedance_label(source.impedance_model), shape='box')
    interface = loop.interface
    if loop.interface == 'feedback-filter':
        interface += f'\\ncutoff={loop.cutoff_hz:g} Hz'
    elif loop.interface == 'shifting-impedance':
        interface += f'\\nz_shift={loop.z_shift_ohm:g} ohm'
    graph.node('interface', label=interface, shape='diamond')

    amp = loop.amp
    label = (f'G_amp\\ngain={amp.gain:g}\\nbandwidth={amp.bandwidth_hz:g} Hz'
             f'\\ndelay={amp.delay_s:g} s')
    if amp.saturation_v is not None:
        label += f'\\nsaturation={amp.saturation_v:g} V'
    graph.node('amplifier', label=label, shape='box')
    graph.node('hut', label='HUT G_h\\n' + _impedance_label(loop.load),
               shape='box3d')
    graph.node('sensor', label=f'sensor\\ndelay={loop.sensor_delay_s:g} s',
               shape='box')

    graph.edge('source', 'interface', 'e')
    graph.edge('interface', 'amplifier', 'command')
    graph.edge('amplifier', 'hut', 'voltage')
    graph.edge('hut', 'sensor', 'current')
    graph.edge('sensor', 'z_source', 'feedback')
    graph.edge('z_source', 'interface', 'drop')

    if loop.disturbance is not None:
        graph.node('disturbance',
                   label=f'd(t)\\n{loop.disturbance.kind}', shape='circle')
        graph.edge('disturbance', 'hut', '+')
    if loop.phase_advance is not None:
        advances = ', '.join(f'h{h}: {loop.phase_advance.advance_deg(h):.1f}'
                             f' deg' for h in loop.phase_advance.harmonics)
        graph.node('phase_advance', label=f'phase advance\\n{advances}',
                   shape='note')
        graph.edge('phase_advance', 'source', style='dashed')
    if loop.extrapolator is not None:
        graph.node('extrapolator',
                   label=f'extrapolator\\norder={loop.extrapolator.order}',
                   shape='note')
        graph.edge('extrapolator', 'z_source', style='dashed')

    graph.render(view=view)
    return graph


def plot_wiring(units, config, view=True, **kwargs):
    """Draw the co-simulation units and the port connections between them.

    Each unit node shows its lookahead; each edge is labeled
    ``output port -> input port``.

    kwargs are passed to graphviz.Digraph()
    """
    routes = validate_wiring(units, config.wiring)
    graph = Digraph(**kwargs)
    graph.attr(rankdir='LR')
    for unit in sorted(units, key=lambda u: u.name):
        graph.node(unit.name, label=f'{unit.name}\\n{type(unit).__name__}'
                                    f'\\nlookahead={unit.lookahead_s:g} s',
                   shape='box')
    for (source, out_port), targets in sorted(routes.items()):
        for target, in_port in targets:
            lag = (config.lags or {}).get(source, 0)
            label = f'{out_port} -> {in_port}'
            if config.mode == 'hub' and lag:
                label += f'\\nlag={lag}'
            graph.edge(source, target, label)
    graph.render(view=view)
    return graph
