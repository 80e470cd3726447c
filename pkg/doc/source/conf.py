# -*- coding: utf-8 -*-
#
# attr-desk documentation build configuration file.
#
# Only the values that differ from the sphinx-build defaults are set here.

import datetime
import os
import sys

sys.path.insert(0, os.path.abspath('../../'))

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    'sphinx.ext.coverage',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'sphinx.ext.napoleon',
    'sphinx.ext.autosummary',
]

templates_path = ['../templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'attr-desk'
year = datetime.datetime.now().year
copyright = ' %d, The attr-desk developers' % year
author = 'The attr-desk developers'

version = '0.1.0'
release = '0.1.0'

exclude_patterns = ['_build']
pygments_style = 'sphinx'
todo_include_todos = False

# -- Options for HTML output ----------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_title = 'attr-desk v0.1.0'
html_show_sourcelink = False
htmlhelp_basename = 'attrdeskdoc'

# -- Options for LaTeX and manual page output -----------------------------

latex_documents = [
    (master_doc, 'attr-desk.tex', 'attr-desk Documentation',
     author, 'manual'),
]

man_pages = [
    (master_doc, 'attr-desk', 'attr-desk Documentation',
     [author], 1)
]

# -- Extension configuration ----------------------------------------------

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable', None),
}

autodoc_member_order = 'bysource'
autosummary_generate = True
autoclass_content = "both"
