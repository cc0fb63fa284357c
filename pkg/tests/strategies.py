from hypothesis import strategies as st

from mbrdistill.core import Annotation, ErrorSpan, Severity

severities = st.sampled_from([Severity.MINOR, Severity.MAJOR])
categories = st.one_of(
    st.none(),
    st.sampled_from(["accuracy/mistranslation", "fluency/grammar", "style", "non-translation", "terminology"]),
)


@st.composite
def spans_for(draw, n, max_spans=5, with_category=True):
    if n == 0:
        return Annotation()
    k = draw(st.integers(0, max_spans))
    out = []
    for _ in range(k):
        a = draw(st.integers(0, n - 1))
        b = draw(st.integers(a + 1, n))
        cat = draw(categories) if with_category else None
        out.append(ErrorSpan(a, b, draw(severities), cat))
    return Annotation(tuple(out))


@st.composite
def translation_and_annotation(draw, alphabet=None, max_len=50, max_spans=5, with_category=True):
    text = draw(st.text(alphabet=alphabet, max_size=max_len) if alphabet else st.text(max_size=max_len))
    ann = draw(spans_for(len(text), max_spans, with_category))
    return text, ann
